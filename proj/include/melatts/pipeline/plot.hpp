#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "melatts/pipeline/synth.hpp"

namespace melatts {

// ---- tiny raster canvas + PNG encoder (zlib-deflated) ----

struct Rgb {
    uint8_t r = 0, g = 0, b = 0;
};

class Canvas {
public:
    Canvas(int width, int height, Rgb bg = {255, 255, 255}) : w_(width), h_(height), px_(width * height, bg) {}

    int width() const { return w_; }
    int height() const { return h_; }

    void set(int x, int y, Rgb c) {
        if (x >= 0 && x < w_ && y >= 0 && y < h_) px_[static_cast<size_t>(y) * w_ + x] = c;
    }

    void line(int x0, int y0, int x1, int y1, Rgb c) {
        const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            set(x0, y0, c);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    void fill_rect(int x, int y, int w, int h, Rgb c) {
        for (int j = y; j < y + h; ++j)
            for (int i = x; i < x + w; ++i) set(i, j, c);
    }

    void text(int x, int y, const std::string& s, Rgb c) {
        for (char ch : s) {
            draw_glyph(x, y, ch, c);
            x += 6;
        }
    }

    void write_png(const std::string& path) const {
        // filter byte 0 per scanline
        std::vector<uint8_t> raw;
        raw.reserve(static_cast<size_t>(h_) * (1 + 3 * w_));
        for (int y = 0; y < h_; ++y) {
            raw.push_back(0);
            for (int x = 0; x < w_; ++x) {
                const Rgb& p = px_[static_cast<size_t>(y) * w_ + x];
                raw.push_back(p.r);
                raw.push_back(p.g);
                raw.push_back(p.b);
            }
        }
        uLongf bound = compressBound(static_cast<uLong>(raw.size()));
        std::vector<uint8_t> compressed(bound);
        if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
            throw std::runtime_error("png: deflate failed");
        compressed.resize(bound);

        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for write: " + path);
        static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
        out.write(reinterpret_cast<const char*>(sig), 8);

        auto chunk = [&](const char* type, const std::vector<uint8_t>& payload) {
            auto be32 = [](uint32_t v) {
                return std::array<uint8_t, 4>{static_cast<uint8_t>(v >> 24), static_cast<uint8_t>(v >> 16),
                                              static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v)};
            };
            const auto len = be32(static_cast<uint32_t>(payload.size()));
            out.write(reinterpret_cast<const char*>(len.data()), 4);
            std::vector<uint8_t> body(type, type + 4);
            body.insert(body.end(), payload.begin(), payload.end());
            out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
            const auto crc = be32(static_cast<uint32_t>(crc32(0, body.data(), static_cast<uInt>(body.size()))));
            out.write(reinterpret_cast<const char*>(crc.data()), 4);
        };

        std::vector<uint8_t> ihdr(13, 0);
        const uint32_t w = static_cast<uint32_t>(w_), h = static_cast<uint32_t>(h_);
        ihdr[0] = w >> 24;
        ihdr[1] = w >> 16;
        ihdr[2] = w >> 8;
        ihdr[3] = w;
        ihdr[4] = h >> 24;
        ihdr[5] = h >> 16;
        ihdr[6] = h >> 8;
        ihdr[7] = h;
        ihdr[8] = 8;   // bit depth
        ihdr[9] = 2;   // truecolor
        chunk("IHDR", ihdr);
        chunk("IDAT", compressed);
        chunk("IEND", {});
        if (!out) throw std::runtime_error("write failed: " + path);
    }

private:
    // 5x7 glyphs, rows top to bottom, '#' = on.
    static const char* glyph(char c) {
        static const std::map<char, const char*> font = {
            {'0', " ### #  ###  ###  ## #  # #### "}, {'1', "  #   ##    #    #    #    #   ###  "},
            {'2', " ### #   #    #   #   #   #    #####"}, {'3', " ### #   #    # ##     ##   # ### "},
            {'4', "   #   ##  # #  #  # ##### #    # "}, {'5', "#####    #    #### #   #   # ### "},
            {'6', " ### #    #    #### #   ##   # ### "}, {'7', "#####    #   #   #   #   #    #   "},
            {'8', " ### #   ##   # ### #   ##   # ### "}, {'9', " ### #   ##   # ####    #    # ## "},
            {'a', "      ##     # ####  #   # ####"}, {'b', "#    #    #### #   ##   ##   ##### "},
            {'c', "      ###  #    #    #    #    ### "}, {'d', "    #    # #####   ##   ##   # ####"},
            {'e', "      ###  #   # ##### #     ### "}, {'f', "  ##  #    #   ###   #    #    #   "},
            {'g', " #### #   # #### #    ###    #  ## "}, {'h', "#    #    #### #   ##   ##   ##   #"},
            {'i', "  #        ##    #    #    #   ### "}, {'j', "   #       #    #    # #  # #  ## "},
            {'k', "#    #  # # #  ##   # #  # #  # #  #"}, {'l', " ##    #    #    #    #    #   ### "},
            {'m', "     ## # # # # ## # ## # ## # #"}, {'n', "     #### #   ##   ##   ##   ##   #"},
            {'o', "      ###  #   ##   ##   #  ### "}, {'p', "     #### #   ##### #    #    #    "},
            {'q', "      ####  #  # ####    #    #    #"}, {'r', "     # ### ##   #    #    #    "},
            {'s', "      #### #     ###     # #### "}, {'t', " #    #   ###   #    #    #     ## "},
            {'u', "     #   ##   ##   ##   ##  ## ## #"}, {'v', "     #   ##   ##   # # #   #   "},
            {'w', "     # # ## # ## # ## # # # # "}, {'x', "     #   # # #   #   # # #   #"},
            {'y', "     #   ##   # #### #    # ###  "}, {'z', "     #####   #   #   #   # ####"},
            {'.', "                      ##   ##  "}, {'-', "               ####           "},
            {'_', "                          #####"}, {':', "       ##   ##        ##   ##  "},
            {'=', "          ####      ####      "}, {' ', "                              "},
            {'%', "##   ##  #   #   #   #  #   ## "}, {'/', "    #   #   #   #   #   #   #    "},
        };
        const auto it = font.find(c);
        return it == font.end() ? font.at('.') : it->second;
    }

    void draw_glyph(int x, int y, char c, Rgb col) {
        const char* g = glyph(c);
        const int n = static_cast<int>(std::char_traits<char>::length(g));
        for (int row = 0; row < 7; ++row)
            for (int cx = 0; cx < 5; ++cx) {
                const int idx = row * 5 + cx;
                if (idx < n && g[idx] == '#') set(x + cx, y + row, col);
            }
    }

    int w_, h_;
    std::vector<Rgb> px_;
};

// ---- convergence plot: error rate vs training step ----

struct PlotSeries {
    std::string name;
    std::vector<std::pair<int64_t, double>> points;  // (step, error rate)
};

inline PlotSeries series_from_report(const std::string& name, const std::vector<EvalReportEntry>& entries) {
    PlotSeries s;
    s.name = name;
    for (const auto& e : entries) s.points.push_back({e.step, 1.0 - e.content_accuracy});
    return s;
}

// Renders labeled error-rate curves to a PNG and writes the underlying
// points as CSV (one row per evaluation point) next to it.
inline void plot_convergence(const std::vector<PlotSeries>& series, const std::string& png_path,
                             const std::string& csv_path) {
    if (series.empty()) throw std::invalid_argument("plot_convergence: no series");
    size_t total_points = 0;
    int64_t max_step = 1;
    for (const auto& s : series) {
        total_points += s.points.size();
        for (const auto& p : s.points) max_step = std::max(max_step, p.first);
    }
    if (total_points == 0) throw std::invalid_argument("plot_convergence: series have no points");

    {
        std::ofstream csv(csv_path, std::ios::trunc);
        if (!csv) throw std::runtime_error("cannot open for write: " + csv_path);
        csv << "series,step,error_rate\n";
        for (const auto& s : series)
            for (const auto& [step, err] : s.points) csv << s.name << "," << step << "," << err << "\n";
    }

    const int W = 640, H = 400, ml = 60, mr = 20, mt = 20, mb = 40;
    Canvas canvas(W, H);
    const Rgb axis{40, 40, 40}, grid{225, 225, 225};
    static const Rgb palette[] = {{214, 69, 65}, {31, 119, 180}, {44, 160, 44}, {148, 103, 189},
                                  {255, 127, 14}, {23, 190, 207}};

    const int pw = W - ml - mr, ph = H - mt - mb;
    // y in [0, 1] error rate; x in [0, max_step]
    auto px = [&](double step) { return ml + static_cast<int>(std::lround(step / max_step * pw)); };
    auto py = [&](double err) {
        return mt + static_cast<int>(std::lround((1.0 - std::clamp(err, 0.0, 1.0)) * ph));
    };

    for (int g10 = 0; g10 <= 10; g10 += 2) {
        const double err = g10 / 10.0;
        canvas.line(ml, py(err), W - mr, py(err), grid);
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%.1f", err);
        canvas.text(ml - 30, py(err) - 3, buf, axis);
    }
    canvas.line(ml, mt, ml, H - mb, axis);
    canvas.line(ml, H - mb, W - mr, H - mb, axis);
    canvas.text(ml + pw / 2 - 30, H - mb + 12, "steps", axis);
    canvas.text(4, mt + 4, "error", axis);
    {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(max_step));
        canvas.text(W - mr - 6 * static_cast<int>(std::char_traits<char>::length(buf)), H - mb + 12, buf, axis);
        canvas.text(ml - 3, H - mb + 12, "0", axis);
    }

    for (size_t si = 0; si < series.size(); ++si) {
        const Rgb c = palette[si % (sizeof(palette) / sizeof(palette[0]))];
        const auto& pts = series[si].points;
        for (size_t i = 1; i < pts.size(); ++i)
            canvas.line(px(static_cast<double>(pts[i - 1].first)), py(pts[i - 1].second),
                        px(static_cast<double>(pts[i].first)), py(pts[i].second), c);
        for (const auto& [step, err] : pts)
            canvas.fill_rect(px(static_cast<double>(step)) - 1, py(err) - 1, 3, 3, c);
        // legend
        const int ly = mt + 8 + static_cast<int>(si) * 12;
        canvas.fill_rect(ml + 10, ly, 10, 6, c);
        canvas.text(ml + 26, ly - 1, series[si].name, axis);
    }
    canvas.write_png(png_path);
}

}  // namespace melatts
