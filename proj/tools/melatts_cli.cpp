// Command-line front end: corpus generation, training, synthesis, streaming,
// evaluation and convergence plots.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "melatts/melatts.hpp"

namespace fs = std::filesystem;
using namespace melatts;

namespace {

std::optional<uint64_t> env_seed() {
    if (const char* env = std::getenv("MELATTS_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end != env && *end == '\0') return static_cast<uint64_t>(v);
        std::cerr << "warning: ignoring unparsable MELATTS_SEED='" << env << "'\n";
    }
    return std::nullopt;
}

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return json::parse(in);
}

MelSpectrogram load_prompt(const std::string& path) {
    if (path.size() > 4 && path.substr(path.size() - 4) == ".mel") return load_mel(path);
    const WavData wav = read_wav(path);
    MelConfig cfg = MelConfig::synthesis_default();
    if (wav.sample_rate != cfg.sample_rate)
        throw std::runtime_error("prompt must be sampled at " + std::to_string(cfg.sample_rate) + " Hz, got " +
                                 std::to_string(wav.sample_rate));
    return compute_mel(wav.samples, cfg);
}

int cmd_gen_corpus(const std::string& spec_path, const std::string& out_dir, uint64_t seed) {
    ToyCorpusSpec spec;
    uint64_t corpus_seed = seed;
    if (!spec_path.empty()) {
        const json j = load_json(spec_path);
        spec = ToyCorpusSpec::from_json(j.at("spec"));
        if (j.contains("seed")) corpus_seed = j.at("seed");
    }
    if (const auto s = env_seed()) corpus_seed = *s;
    const Corpus corpus = generate_corpus(spec, corpus_seed);
    save_corpus(corpus, out_dir);
    std::cout << "wrote " << corpus.train.size() << " train + " << corpus.eval.size() << " eval utterances to "
              << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& corpus_dir, const std::string& out_dir,
              const std::string& resume_path) {
    const json j = load_json(config_path);
    TrainConfig config = TrainConfig::from_json(j);
    if (const auto s = env_seed()) config.seed = *s;

    const Corpus corpus = load_corpus(corpus_dir);
    std::optional<Trainer> trainer;
    if (resume_path.empty()) {
        trainer.emplace(config, corpus);
    } else {
        trainer.emplace(load_checkpoint(resume_path), corpus);
    }
    fs::create_directories(out_dir);
    const std::string report_path = (fs::path(out_dir) / "train_log.jsonl").string();
    const std::string ckpt_path = (fs::path(out_dir) / "checkpoint.bin").string();

    auto& state = trainer->state();
    while (state.step < state.config.steps) {
        const StepStats st = trainer->train_step();
        const int64_t step = state.step;
        if (step % 50 == 0 || step == state.config.steps)
            std::cout << "step " << step << "/" << state.config.steps << " diff " << st.loss_diff << " stop "
                      << st.loss_stop << " align " << st.loss_align << " lr " << st.lr << "\n";
        if (state.config.eval_every > 0 &&
            (step % state.config.eval_every == 0 || step == state.config.steps)) {
            const auto m = evaluate(state, corpus, false, SynthMode::Offline, state.config.eval_utterances,
                                    derive_seed(state.config.seed, 0xE0A1), state.config.num_threads);
            EvalReportEntry entry;
            entry.step = step;
            entry.mode = "offline";
            entry.split = "train";
            entry.content_accuracy = m.content_accuracy;
            entry.ss_proxy = m.ss_proxy;
            entry.stop_accuracy = m.stop_accuracy;
            entry.loss_diff = st.loss_diff;
            entry.loss_stop = st.loss_stop;
            entry.loss_align = st.loss_align;
            entry.utterances = m.utterances;
            append_report(report_path, entry);
            std::cout << "  eval: content " << m.content_accuracy << " ss " << m.ss_proxy << " stop "
                      << m.stop_accuracy << "\n";
            save_checkpoint(state, ckpt_path);
        }
    }
    save_checkpoint(state, ckpt_path);
    std::cout << "checkpoint: " << ckpt_path << "\n";
    return 0;
}

int cmd_synth(const std::string& ckpt, const std::string& text, const std::string& prompt_path, uint64_t seed,
              const std::string& out_path, int nfe, double cfg_alpha) {
    TrainState state = load_checkpoint(ckpt);
    if (const auto s = env_seed()) seed = *s;
    SamplerConfig sampler = state.config.sampler;
    if (nfe > 0) sampler.nfe = nfe;
    if (cfg_alpha >= 0) sampler.cfg_alpha = cfg_alpha;

    const MelSpectrogram prompt = load_prompt(prompt_path);
    const auto tokens = state.model.tokenizer.encode(text);
    const SynthesisResult result = synthesize_offline(state, tokens, prompt, sampler, seed);
    write_wav(out_path, result.waveform, MelConfig::synthesis_default().sample_rate);
    std::cout << "wrote " << out_path << " (" << result.gen.chunks.size() << " chunks, stop at "
              << result.gen.stop_step << (result.gen.truncated ? ", truncated" : "") << ")\n";
    return 0;
}

// Sink that writes one WAV per chunk plus a JSON-lines event log.
class SegmentSink : public ChunkSink {
public:
    SegmentSink(const TrainState& state, std::string dir) : state_(state), dir_(std::move(dir)) {
        fs::create_directories(dir_);
        events_.open(fs::path(dir_) / "events.jsonl");
    }

    void on_chunk(int index, const Matrix<float>& raw_mel_chunk) override {
        MelSpectrogram mel;
        mel.config = MelConfig::synthesis_default();
        mel.frames = raw_mel_chunk;
        mel.frame_rate = mel.config.frame_rate();
        const auto wave = invert_mel(mel, mel.config, 16);
        char name[32];
        std::snprintf(name, sizeof(name), "chunk_%04d.wav", index);
        write_wav((fs::path(dir_) / name).string(), wave, mel.config.sample_rate);
    }

    void on_event(const StreamEvent& ev) override {
        events_ << json{{"event", StreamEvent::name(ev.kind)},
                        {"index", ev.index},
                        {"logical", ev.logical},
                        {"wall_ms", ev.wall_ms}}
                       .dump()
                << "\n";
        events_.flush();
    }

private:
    const TrainState& state_;
    std::string dir_;
    std::ofstream events_;
};

// Line-buffered stdin token source: each line's characters are tokenized and
// queued; EOF is the end marker.
class StdinTokenSource : public TokenSource {
public:
    explicit StdinTokenSource(const Tokenizer& tok) : tok_(tok) {}
    std::optional<int> next() override {
        while (queue_.empty()) {
            std::string line;
            if (!std::getline(std::cin, line)) return std::nullopt;
            for (char c : line) {
                if (c == ' ' || c == '\t' || c == '\r') continue;
                queue_.push_back(tok_.id_of(c));
            }
        }
        const int id = queue_.front();
        queue_.erase(queue_.begin());
        return id;
    }

private:
    const Tokenizer& tok_;
    std::vector<int> queue_;
};

int cmd_stream(const std::string& ckpt, const std::string& prompt_path, const std::string& out_dir,
               uint64_t seed, int nfe) {
    TrainState state = load_checkpoint(ckpt);
    if (const auto s = env_seed()) seed = *s;

    GenerationOptions opt;
    opt.policy = state.config.policy;
    opt.sampler = state.config.sampler;
    if (nfe > 0) opt.sampler.nfe = nfe;
    opt.seed = seed;
    opt.stop_threshold = state.config.stop_threshold;
    opt.max_prompt_chunks = state.config.max_prompt_chunks;

    const GenPrompt prompt = make_prompt(state.model, load_prompt(prompt_path), opt.max_prompt_chunks);
    SegmentSink sink(state, out_dir);
    StdinTokenSource source(state.model.tokenizer);
    const GenerationResult result = streaming_generate(state.model, source, prompt, opt, &sink);
    std::cout << "emitted " << result.chunks.size() << " chunks to " << out_dir
              << (result.truncated ? " (truncated by runaway guard)" : "") << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& corpus_dir, const std::string& mode_str,
             const std::string& report_path, int max_utterances, bool eval_split, bool ground_truth,
             uint64_t seed) {
    TrainState state = load_checkpoint(ckpt);
    if (const auto s = env_seed()) seed = *s;
    const Corpus corpus = load_corpus(corpus_dir);
    const SynthMode mode = synth_mode_from_string(mode_str);

    const EvalMetrics m = ground_truth
                              ? evaluate_ground_truth(state, corpus, eval_split, max_utterances)
                              : evaluate(state, corpus, eval_split, mode, max_utterances, seed,
                                         state.config.num_threads);
    EvalReportEntry entry;
    entry.step = state.step;
    entry.mode = to_string(mode);
    entry.split = eval_split ? "eval" : "train";
    entry.content_accuracy = m.content_accuracy;
    entry.ss_proxy = m.ss_proxy;
    entry.stop_accuracy = m.stop_accuracy;
    entry.utterances = m.utterances;
    if (!report_path.empty()) append_report(report_path, entry);
    std::cout << entry.to_json().dump(2) << "\n";
    return 0;
}

int cmd_plot(const std::vector<std::string>& report_paths, const std::string& out_png) {
    std::vector<PlotSeries> series;
    for (const auto& path : report_paths)
        series.push_back(series_from_report(fs::path(path).stem().string(), read_report(path)));
    std::string csv = out_png;
    const auto dot = csv.find_last_of('.');
    csv = (dot == std::string::npos ? csv : csv.substr(0, dot)) + ".csv";
    plot_convergence(series, out_png, csv);
    std::cout << "wrote " << out_png << " and " << csv << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"melatts: autoregressive mel-chunk synthesis at desk scale"};
    app.require_subcommand(1);

    // gen-corpus
    std::string spec_path, out_dir;
    uint64_t seed = 1;
    auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
    gen->add_option("--spec", spec_path, "corpus spec JSON ({\"spec\": {...}, \"seed\": n})");
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--seed", seed, "corpus seed");

    // train
    std::string config_path, corpus_dir, resume_path, train_out;
    auto* train = app.add_subcommand("train", "train from a corpus directory");
    train->add_option("--config", config_path, "TrainConfig JSON")->required();
    train->add_option("--corpus", corpus_dir, "corpus directory")->required();
    train->add_option("--out", train_out, "output directory for checkpoint and logs")->required();
    train->add_option("--resume", resume_path, "checkpoint to resume from");

    // synth
    std::string ckpt, text, prompt_path, wav_out;
    uint64_t synth_seed = 0;
    int nfe = 0;
    double cfg_alpha = -1;
    auto* synth = app.add_subcommand("synth", "offline synthesis to a WAV file");
    synth->add_option("--ckpt", ckpt, "checkpoint file")->required();
    synth->add_option("--text", text, "text to speak")->required();
    synth->add_option("--prompt", prompt_path, "prompt speech (.wav or .mel)")->required();
    synth->add_option("--seed", synth_seed, "sampling seed");
    synth->add_option("--out", wav_out, "output WAV path")->required();
    synth->add_option("--nfe", nfe, "denoiser evaluations per chunk (default from checkpoint)");
    synth->add_option("--cfg-alpha", cfg_alpha, "guidance strength (default from checkpoint)");

    // stream
    std::string stream_ckpt, stream_prompt, stream_out;
    uint64_t stream_seed = 0;
    int stream_nfe = 0;
    auto* stream = app.add_subcommand("stream", "streaming synthesis: tokens from stdin, WAV segments out");
    stream->add_option("--ckpt", stream_ckpt, "checkpoint file")->required();
    stream->add_option("--prompt", stream_prompt, "prompt speech (.wav or .mel)")->required();
    stream->add_option("--out-dir", stream_out, "segment + event log directory")->required();
    stream->add_option("--seed", stream_seed, "sampling seed");
    stream->add_option("--nfe", stream_nfe, "denoiser evaluations per chunk");

    // eval
    std::string eval_ckpt, eval_corpus, eval_mode = "offline", eval_report;
    int eval_max = 64;
    bool eval_split = false, ground_truth = false;
    uint64_t eval_seed = 0;
    auto* eval = app.add_subcommand("eval", "report content/speaker/stop metrics");
    eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--corpus", eval_corpus, "corpus directory")->required();
    eval->add_option("--mode", eval_mode, "offline|streaming");
    eval->add_option("--report", eval_report, "JSONL report to append to");
    eval->add_option("--max-utterances", eval_max, "utterance budget");
    eval->add_flag("--eval-split", eval_split, "use the held-out split");
    eval->add_flag("--ground-truth", ground_truth, "score ground-truth mels (oracle sanity)");
    eval->add_option("--seed", eval_seed, "evaluation seed");

    // plot-convergence
    std::vector<std::string> reports;
    std::string plot_out;
    auto* plot = app.add_subcommand("plot-convergence", "error-rate-vs-steps curves from JSONL reports");
    plot->add_option("--reports", reports, "one or more JSONL report files")->required()->expected(-1);
    plot->add_option("--out", plot_out, "output PNG path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_corpus(spec_path, out_dir, seed);
        if (train->parsed()) return cmd_train(config_path, corpus_dir, train_out, resume_path);
        if (synth->parsed()) return cmd_synth(ckpt, text, prompt_path, synth_seed, wav_out, nfe, cfg_alpha);
        if (stream->parsed()) return cmd_stream(stream_ckpt, stream_prompt, stream_out, stream_seed, stream_nfe);
        if (eval->parsed())
            return cmd_eval(eval_ckpt, eval_corpus, eval_mode, eval_report, eval_max, eval_split, ground_truth,
                            eval_seed);
        if (plot->parsed()) return cmd_plot(reports, plot_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
