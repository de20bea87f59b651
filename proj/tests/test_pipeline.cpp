#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "melatts/melatts.hpp"

using namespace melatts;

namespace {

ToyCorpusSpec small_spec() {
    ToyCorpusSpec spec;
    spec.num_train = 24;
    spec.num_eval = 8;
    spec.min_tokens = 2;
    spec.max_tokens = 4;
    return spec;
}

TrainConfig small_config(int steps = 5) {
    TrainConfig tc;
    tc.steps = steps;
    tc.batch_size = 2;
    tc.num_threads = 1;
    tc.model = ModelConfig::tiny();
    tc.model.n_mels = 80;
    tc.model.chunk_frames = 8;
    tc.model.max_positions = 96;
    tc.model.utt_max_frames = 64;
    tc.model.asr_n_mels = 128;
    tc.model.asr_width = 16;
    tc.model.d_asr = 16;
    tc.crop_min_frames = 8;
    tc.crop_max_frames = 24;
    tc.sampler.nfe = 2;
    return tc;
}

std::string temp_dir(const std::string& name) {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / ("melatts_pipeline_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

}  // namespace

TEST_CASE("generate_corpus shapes, determinism and margins", "[pipeline]") {
    const auto spec = small_spec();
    const Corpus a = generate_corpus(spec, 5);
    const Corpus b = generate_corpus(spec, 5);
    const Corpus c = generate_corpus(spec, 6);

    REQUIRE(a.train.size() == 24);
    REQUIRE(a.eval.size() == 8);
    for (const auto& item : a.train) {
        REQUIRE(item.mel.rows() == static_cast<int>(item.token_classes.size()) * 8);
        REQUIRE(item.mel.cols() == 80);
        REQUIRE(item.token_classes.size() >= 2);
        REQUIRE(item.token_classes.size() <= 4);
        REQUIRE(item.speaker >= 0);
        REQUIRE(item.speaker < 2);
    }
    CHECK(a.train[3].text == b.train[3].text);
    CHECK(max_abs_diff(a.train[3].mel, b.train[3].mel) == 0.0f);
    bool any_diff = false;
    for (size_t i = 0; i < a.train.size() && !any_diff; ++i) any_diff = a.train[i].text != c.train[i].text;
    CHECK(any_diff);

    // a 5-token utterance spans 40 frames
    ToyCorpusSpec five = spec;
    five.min_tokens = five.max_tokens = 5;
    const Corpus d = generate_corpus(five, 1);
    CHECK(d.train[0].mel.rows() == 40);

    // degenerate specs are rejected
    ToyCorpusSpec crowded = spec;
    crowded.num_classes = 26;  // needs more mel bands than available
    CHECK_THROWS_AS(generate_corpus(crowded, 1), std::invalid_argument);
    ToyCorpusSpec strict = spec;
    strict.template_margin = 1e9;
    CHECK_THROWS_AS(generate_corpus(strict, 1), std::invalid_argument);
}

TEST_CASE("oracle decodes clean corpus perfectly and is tilt invariant", "[pipeline]") {
    ToyCorpusSpec spec = small_spec();
    spec.noise_level = 0.0;
    const Corpus corpus = generate_corpus(spec, 9);
    for (const auto& item : corpus.train) {
        const auto decoded = oracle_decode(item.mel, corpus);
        REQUIRE(decoded == item.token_classes);
    }

    // exaggerated tilt on top of a clean item still decodes
    const auto& item = corpus.train[0];
    Matrix<float> tilted = item.mel;
    for (int r = 0; r < tilted.rows(); ++r)
        for (int c = 0; c < tilted.cols(); ++c) tilted(r, c) += 3.0f * corpus.tilt_basis(0, c);
    CHECK(oracle_decode(tilted, corpus) == item.token_classes);
}

TEST_CASE("oracle accuracy at chance level on pure noise", "[pipeline]") {
    ToyCorpusSpec spec;
    spec.num_train = 1;
    spec.num_eval = 1;
    const Corpus corpus = generate_corpus(spec, 3);
    Rng rng(10);
    int hits = 0;
    const int trials = 400;
    for (int i = 0; i < trials; ++i) {
        Matrix<float> noise = gaussian_matrix<float>(8, 80, rng, 3.0);
        for (size_t j = 0; j < noise.size(); ++j) noise.data()[j] += -8.0f;
        const auto decoded = oracle_decode(noise, corpus);
        hits += decoded[0] == rng.uniform_int(spec.num_classes) ? 1 : 0;
    }
    // both sides uniform over K classes: match rate ~ 1/K
    const double rate = static_cast<double>(hits) / trials;
    const double sigma = std::sqrt((1.0 / 16) * (15.0 / 16) / trials);
    CHECK(std::abs(rate - 1.0 / 16) < 4 * sigma);
}

TEST_CASE("oracle accuracy degrades monotonically with corpus noise", "[pipeline]") {
    double prev = 1.1;
    for (double noise : {0.0, 2.0, 4.0, 6.0, 16.0}) {
        ToyCorpusSpec spec = small_spec();
        spec.num_train = 40;
        spec.noise_level = noise;
        const Corpus corpus = generate_corpus(spec, 17);
        double acc = 0;
        for (const auto& item : corpus.train)
            acc += content_accuracy(item.token_classes, oracle_decode(item.mel, corpus));
        acc /= corpus.train.size();
        INFO("noise " << noise << " accuracy " << acc);
        CHECK(acc <= prev + 0.02);
        prev = acc;
    }
}

TEST_CASE("content accuracy counts length mismatches", "[pipeline]") {
    CHECK(content_accuracy({1, 2, 3}, {1, 2, 3}) == 1.0);
    CHECK(content_accuracy({1, 2, 3}, {1, 2}) == Catch::Approx(2.0 / 3));
    CHECK(content_accuracy({1, 2}, {1, 2, 9, 9}) == Catch::Approx(0.5));
    CHECK(content_accuracy({}, {}) == 1.0);
}

TEST_CASE("corpus save and load round trip", "[pipeline]") {
    const auto dir = temp_dir("corpus");
    const Corpus corpus = generate_corpus(small_spec(), 11);
    save_corpus(corpus, dir);
    const Corpus back = load_corpus(dir);
    REQUIRE(back.train.size() == corpus.train.size());
    CHECK(back.train[5].text == corpus.train[5].text);
    CHECK(max_abs_diff(back.train[5].mel, corpus.train[5].mel) == 0.0f);
    CHECK(back.spec.noise_level == corpus.spec.noise_level);
}

TEST_CASE("train_step loss composition and determinism", "[pipeline]") {
    const Corpus corpus = generate_corpus(small_spec(), 13);

    // align disabled reports exactly zero align loss
    {
        TrainConfig tc = small_config(3);
        tc.align_target = AlignTarget::None;
        Trainer trainer(tc, corpus);
        const auto st = trainer.train_step();
        CHECK(st.loss_align == 0.0);
        CHECK(st.total == Catch::Approx(st.loss_diff + st.loss_stop + st.loss_align).margin(1e-9));
    }
    // align enabled: total equals the component sum
    {
        TrainConfig tc = small_config(3);
        Trainer trainer(tc, corpus);
        const auto st = trainer.train_step();
        CHECK(st.loss_align > 0.0);
        CHECK(st.total == Catch::Approx(st.loss_diff + st.loss_stop + st.loss_align).margin(1e-9));
    }
    // identical configs give identical trajectories
    {
        TrainConfig tc = small_config(3);
        Trainer a(tc, corpus), b(tc, corpus);
        for (int s = 0; s < 3; ++s) {
            const auto sa = a.train_step();
            const auto sb = b.train_step();
            REQUIRE(sa.total == sb.total);
        }
        double diff = 0;
        for (size_t e = 0; e < a.state().model.params.entries.size(); ++e)
            diff = std::max<double>(diff, max_abs_diff(a.state().model.params.entries[e].value,
                                                       b.state().model.params.entries[e].value));
        CHECK(diff == 0.0);
    }
}

TEST_CASE("mel-target ablation swaps the alignment objective", "[pipeline]") {
    const Corpus corpus = generate_corpus(small_spec(), 13);
    TrainConfig tc = small_config(2);
    tc.align_target = AlignTarget::Mel;
    Trainer trainer(tc, corpus);
    // TAM sized for the mel rate: factor 8, n_mels outputs
    const auto dims = trainer.state().model.tam_dims();
    CHECK(dims.factor == 8);
    CHECK(dims.d_out == 80);
    const auto st = trainer.train_step();
    CHECK(st.loss_align > 0.0);
    CHECK(std::isfinite(st.total));
}

TEST_CASE("training smoke: loss decreases over 200 steps on a tiny corpus", "[pipeline]") {
    ToyCorpusSpec spec = small_spec();
    spec.num_train = 4;
    spec.min_tokens = 2;
    spec.max_tokens = 2;
    const Corpus corpus = generate_corpus(spec, 29);
    TrainConfig tc = small_config(200);
    tc.batch_size = 4;
    Trainer trainer(tc, corpus);

    double first_window = 0, last_window = 0;
    for (int s = 0; s < 200; ++s) {
        const auto st = trainer.train_step();
        if (s < 20) first_window += st.total;
        if (s >= 180) last_window += st.total;
    }
    INFO("first " << first_window / 20 << " last " << last_window / 20);
    CHECK(last_window < 0.5 * first_window);
}

TEST_CASE("gradient isolation: frozen encoders never move", "[pipeline]") {
    const Corpus corpus = generate_corpus(small_spec(), 13);
    TrainConfig tc = small_config(4);
    Trainer trainer(tc, corpus);

    const auto asr_before = trainer.state().asr_encoder.params;
    const auto spk_before = trainer.state().model.params.at("spkenc.proj");
    for (int s = 0; s < 4; ++s) trainer.train_step();
    for (size_t e = 0; e < asr_before.entries.size(); ++e)
        REQUIRE(max_abs_diff(asr_before.entries[e].value,
                             trainer.state().asr_encoder.params.entries[e].value) == 0.0f);
    REQUIRE(max_abs_diff(spk_before, trainer.state().model.params.at("spkenc.proj")) == 0.0f);

    // and trainable parameters did move
    bool moved = false;
    Trainer fresh(tc, corpus);
    for (const auto& e : trainer.state().model.params.entries)
        if (e.trainable && max_abs_diff(e.value, fresh.state().model.params.at(e.name)) > 0) moved = true;
    CHECK(moved);
}

TEST_CASE("checkpoint round trip, resume equivalence and typed errors", "[pipeline]") {
    const auto dir = temp_dir("ckpt");
    const Corpus corpus = generate_corpus(small_spec(), 13);
    TrainConfig tc = small_config(8);

    // train 4 steps, checkpoint, then compare: (a) 4 more steps after load
    // vs (b) 8 uninterrupted steps
    Trainer a(tc, corpus);
    for (int s = 0; s < 4; ++s) a.train_step();
    const std::string path = dir + "/ck.bin";
    save_checkpoint(a.state(), path);

    // byte-identical save -> load -> save
    TrainState loaded = load_checkpoint(path);
    const std::string path2 = dir + "/ck2.bin";
    save_checkpoint(loaded, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(c1 == c2);

    Trainer resumed(std::move(loaded), corpus);
    Trainer uninterrupted(tc, corpus);
    StepStats ra{}, ua{};
    for (int s = 0; s < 8; ++s) ua = uninterrupted.train_step();
    for (int s = 0; s < 4; ++s) ra = resumed.train_step();
    CHECK(resumed.state().step == uninterrupted.state().step);
    CHECK(ra.total == Catch::Approx(ua.total).margin(1e-6));  // same final-step losses
    double diff = 0;
    for (size_t e = 0; e < resumed.state().model.params.entries.size(); ++e)
        diff = std::max<double>(diff, max_abs_diff(resumed.state().model.params.entries[e].value,
                                                   uninterrupted.state().model.params.entries[e].value));
    CHECK(diff == 0.0f);

    // wrong config is rejected with a typed error and no partial state
    CHECK_THROWS_AS(load_checkpoint(dir + "/missing.bin"), CheckpointError);
    {
        auto bad = read_container(path);
        bad.header["config"]["model"]["n_mels"] = 81;
        write_container(dir + "/bad.bin", bad.header, bad.payload.data(), bad.payload.size());
        CHECK_THROWS_AS(load_checkpoint(dir + "/bad.bin"), CheckpointError);
    }
    {
        auto bad = read_container(path);
        bad.header["schema"] = 99;
        write_container(dir + "/schema.bin", bad.header, bad.payload.data(), bad.payload.size());
        CHECK_THROWS_AS(load_checkpoint(dir + "/schema.bin"), CheckpointError);
    }
}

TEST_CASE("evaluate on ground-truth mels is perfect", "[pipeline]") {
    const Corpus corpus = generate_corpus(small_spec(), 13);
    TrainConfig tc = small_config(1);
    Trainer trainer(tc, corpus);
    const auto m = evaluate_ground_truth(trainer.state(), corpus, false, 16);
    CHECK(m.content_accuracy == 1.0);
    CHECK(m.stop_accuracy == 1.0);
    CHECK(m.utterances == 16);
}

TEST_CASE("speaker proxy separates same and cross speaker ground truth", "[pipeline]") {
    ToyCorpusSpec spec = small_spec();
    spec.num_train = 48;
    const Corpus corpus = generate_corpus(spec, 33);
    TrainConfig tc = small_config(1);
    Trainer trainer(tc, corpus);
    const auto& model = trainer.state().model;

    double same = 0, cross = 0;
    int n_same = 0, n_cross = 0;
    for (size_t i = 0; i < corpus.train.size(); ++i)
        for (size_t j = i + 1; j < corpus.train.size(); ++j) {
            const double cs = cosine(model.speaker_embedding(corpus.train[i].mel),
                                     model.speaker_embedding(corpus.train[j].mel));
            if (corpus.train[i].speaker == corpus.train[j].speaker) {
                same += cs;
                ++n_same;
            } else {
                cross += cs;
                ++n_cross;
            }
        }
    same /= n_same;
    cross /= n_cross;
    INFO("same " << same << " cross " << cross);
    CHECK(same > cross);
    CHECK(cross < 0.9);  // distinct tilts separate
}

TEST_CASE("eval report append and read round trip", "[pipeline]") {
    const auto dir = temp_dir("report");
    const std::string path = dir + "/r.jsonl";
    for (int i = 0; i < 3; ++i) {
        EvalReportEntry e;
        e.step = i * 100;
        e.content_accuracy = 0.5 + 0.1 * i;
        e.mode = i % 2 ? "streaming" : "offline";
        append_report(path, e);
    }
    const auto entries = read_report(path);
    REQUIRE(entries.size() == 3);
    CHECK(entries[2].step == 200);
    CHECK(entries[2].content_accuracy == Catch::Approx(0.7));
}

TEST_CASE("plot_convergence writes a parseable png and full csv", "[pipeline]") {
    const auto dir = temp_dir("plot");
    std::vector<PlotSeries> series(2);
    series[0].name = "align_asr";
    series[1].name = "align_none";
    for (int i = 0; i <= 10; ++i) {
        series[0].points.push_back({i * 100, std::exp(-i / 3.0)});
        series[1].points.push_back({i * 100, std::exp(-i / 6.0)});
    }
    const std::string png = dir + "/fig.png", csv = dir + "/fig.csv";
    plot_convergence(series, png, csv);

    // png signature and IHDR dims present
    std::ifstream in(png, std::ios::binary);
    REQUIRE(in.good());
    unsigned char sig[8];
    in.read(reinterpret_cast<char*>(sig), 8);
    CHECK(sig[0] == 137);
    CHECK(sig[1] == 'P');
    CHECK(sig[2] == 'N');
    CHECK(sig[3] == 'G');

    // csv row count equals total eval points (plus header)
    std::ifstream csvin(csv);
    int rows = 0;
    std::string line;
    while (std::getline(csvin, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 1 + 22);

    CHECK_THROWS_AS(plot_convergence({}, png, csv), std::invalid_argument);
}

TEST_CASE("non-finite loss aborts with diagnostics", "[pipeline]") {
    const Corpus corpus = generate_corpus(small_spec(), 13);
    TrainConfig tc = small_config(2);
    Trainer trainer(tc, corpus);
    // poison a parameter
    trainer.state().model.params.at("dec.tok_emb")(0, 0) = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(trainer.train_step(), std::runtime_error);
}
