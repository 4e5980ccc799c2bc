// peftlab: train byte-level tokenizers, pre-train language adapters with
// masked language modeling on a frozen encoder, fine-tune NER in baseline
// (full fine-tuning) or adapter mode, and report per-language F1 tables.
//
// Exit codes: 0 success, 2 usage/config/data error, 3 budget exhausted but
// resumable (a checkpoint was written), 4 numerical failure.

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "peft/adapter.hpp"
#include "peft/config.hpp"
#include "peft/data.hpp"
#include "peft/encoder.hpp"
#include "peft/eval.hpp"
#include "peft/metrics.hpp"
#include "peft/synthetic.hpp"
#include "peft/tokenizer.hpp"
#include "peft/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitBudget = 3;
constexpr int kExitNumeric = 4;

struct Workspace {
    fs::path workdir = ".";

    std::string resolve(const std::string& path) const {
        if (path.empty()) return path;
        fs::path p(path);
        return p.is_absolute() ? p.string() : (workdir / p).string();
    }
};

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return buf;
}

std::string file_digest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw peft::DataError("cannot open \"" + path + "\" for digest");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return "fnv1a64:" + peft::hash_hex(peft::fnv1a64(bytes));
}

// One directory per run, exclusively held via a lock file for the lifetime
// of the command.
class RunDir {
public:
    RunDir(const Workspace& ws, const std::string& command, std::uint64_t seed) {
        const std::string run_id = timestamp_utc() + "-s" + std::to_string(seed) + "-" + std::to_string(::getpid());
        dir_ = fs::path(ws.resolve("runs")) / (command + "-" + run_id);
        run_id_ = run_id;
        fs::create_directories(dir_);
        lock_path_ = dir_ / "lock";
        lock_fd_ = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (lock_fd_ < 0)
            throw peft::DataError("run directory \"" + dir_.string() + "\" is already in use (lock file exists)");
    }

    ~RunDir() {
        if (lock_fd_ >= 0) {
            ::close(lock_fd_);
            std::error_code ec;
            fs::remove(lock_path_, ec);
        }
    }

    const fs::path& dir() const { return dir_; }
    const std::string& run_id() const { return run_id_; }
    std::string file(const std::string& name) const { return (dir_ / name).string(); }

private:
    fs::path dir_;
    fs::path lock_path_;
    std::string run_id_;
    int lock_fd_ = -1;
};

struct ManifestBuilder {
    json doc;

    ManifestBuilder(const std::string& run_id, const std::string& command) {
        doc["schema"] = "peftlab-run-manifest-v1";
        doc["run_id"] = run_id;
        doc["command"] = command;
        doc["config"] = json::object();
        doc["inputs"] = json::object();
        doc["outputs"] = json::array();
    }

    void config_snapshot(const std::map<std::string, std::string>& kv) {
        for (const auto& [k, v] : kv) doc["config"][k] = v;
    }
    void input(const std::string& path) { doc["inputs"][path] = file_digest(path); }
    void output(const std::string& path) { doc["outputs"].push_back(path); }

    void write(const std::string& path, int exit_status) {
        doc["exit_status"] = exit_status;
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f << doc.dump(2) << "\n";
    }
};

peft::TrainConfig train_config_for(const std::string& config_path, peft::TrainMode mode,
                                   std::optional<double> budget_override) {
    std::map<std::string, std::string> kv;
    if (!config_path.empty()) kv = peft::load_key_values(config_path);
    const auto it = kv.find("mode");
    if (it != kv.end() && peft::train_mode_from_string(it->second) != mode)
        throw peft::ConfigError("config file pins mode " + it->second + " but the command runs " +
                                peft::to_string(mode));
    kv["mode"] = peft::to_string(mode);
    auto cfg = peft::TrainConfig::from_key_values(kv, config_path.empty() ? "<defaults>" : config_path, true);
    if (budget_override) cfg.wall_clock_budget_seconds = *budget_override;
    return cfg;
}

// Encoder vocab comes from the tokenizer unless explicitly pinned.
peft::EncoderConfig resolve_encoder_config(const std::string& init_config_path, const peft::SubwordModel& tokenizer) {
    peft::EncoderConfig cfg;
    if (!init_config_path.empty())
        cfg = peft::encoder_config_from_key_values(peft::load_key_values(init_config_path), init_config_path, true);
    else
        cfg.vocab_size = 0;  // no file: the tokenizer decides
    if (cfg.vocab_size == 0) cfg.vocab_size = tokenizer.vocab_size();
    if (cfg.vocab_size != tokenizer.vocab_size())
        throw peft::ConfigError("encoder config pins vocab_size " + std::to_string(cfg.vocab_size) +
                                " but the tokenizer has " + std::to_string(tokenizer.vocab_size()));
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// results store
// ---------------------------------------------------------------------------

struct SeedScore {
    std::uint64_t seed;
    double dev_f1;
    double test_f1;
    std::size_t best_step;
};

void write_results_entry(const std::string& results_dir, const std::string& language, const std::string& mode,
                         const std::vector<SeedScore>& seeds) {
    fs::create_directories(results_dir);
    json doc;
    doc["schema"] = "peftlab-results-v1";
    doc["language"] = language;
    doc["mode"] = mode;
    doc["seeds"] = json::array();
    double dev_sum = 0, test_sum = 0;
    for (const auto& s : seeds) {
        doc["seeds"].push_back(
            {{"seed", s.seed}, {"dev_f1", s.dev_f1}, {"test_f1", s.test_f1}, {"best_step", s.best_step}});
        dev_sum += s.dev_f1;
        test_sum += s.test_f1;
    }
    doc["mean_dev_f1"] = dev_sum / static_cast<double>(seeds.size());
    doc["mean_test_f1"] = test_sum / static_cast<double>(seeds.size());
    std::ofstream f(results_dir + "/" + language + "__" + mode + ".json", std::ios::binary | std::ios::trunc);
    f << doc.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_tokenizer_train(const Workspace& ws, const std::string& corpus_path, std::size_t vocab_size,
                        const std::string& out_path, std::uint64_t seed) {
    RunDir run(ws, "tokenizer-train", seed);
    ManifestBuilder manifest(run.run_id(), "tokenizer-train");
    const std::string corpus_file = ws.resolve(corpus_path);
    const std::string out_file = ws.resolve(out_path);
    manifest.input(corpus_file);
    manifest.config_snapshot({{"vocab_size", std::to_string(vocab_size)}, {"seed", std::to_string(seed)}});

    const auto corpus = peft::load_text_corpus(corpus_file);
    if (corpus.size() == 0) throw peft::DataError("corpus \"" + corpus_file + "\" has no sentences");
    const auto model = peft::SubwordModel::train(corpus.sentences, vocab_size, seed);
    if (const auto parent = fs::path(out_file).parent_path(); !parent.empty()) fs::create_directories(parent);
    model.save(out_file);
    manifest.output(out_file);
    manifest.write(run.file("manifest.json"), kExitOk);
    std::cout << "tokenizer: " << model.vocab_size() << " tokens (" << model.merge_count() << " merges) -> "
              << out_file << "\n";
    return kExitOk;
}

int cmd_init_encoder(const Workspace& ws, const std::string& tokenizer_path, const std::string& init_config_path,
                     const std::string& out_path, std::uint64_t seed) {
    RunDir run(ws, "init-encoder", seed);
    ManifestBuilder manifest(run.run_id(), "init-encoder");
    const std::string tok_file = ws.resolve(tokenizer_path);
    const std::string out_file = ws.resolve(out_path);
    manifest.input(tok_file);
    const auto tokenizer = peft::SubwordModel::load(tok_file);
    const auto config = resolve_encoder_config(init_config_path.empty() ? "" : ws.resolve(init_config_path), tokenizer);
    const auto weights = peft::init_encoder(config, seed);
    if (const auto parent = fs::path(out_file).parent_path(); !parent.empty()) fs::create_directories(parent);
    peft::save_encoder(weights, out_file);
    manifest.config_snapshot({{"seed", std::to_string(seed)}, {"encoder", config.canonical_string()}});
    manifest.output(out_file);
    manifest.write(run.file("manifest.json"), kExitOk);
    std::cout << "encoder: " << peft::parameter_count(config) << " parameters -> " << out_file << "\n";
    return kExitOk;
}

struct AdapterPretrainArgs {
    std::string corpus, dev_corpus, tokenizer, encoder, init_config, adapter_name = "lang", config, resume, out,
        save_encoder_path;
    std::size_t reduction_factor = 16;
    std::uint64_t init_seed = 42;
    double budget_seconds = -1.0;
    std::int64_t session_steps = -1;
    bool allow_config_change = false;
};

int cmd_adapter_pretrain(const Workspace& ws, const AdapterPretrainArgs& args) {
    const auto tokenizer = peft::SubwordModel::load(ws.resolve(args.tokenizer));
    const auto corpus = peft::load_text_corpus(ws.resolve(args.corpus));
    std::optional<peft::Corpus> dev_corpus;
    if (!args.dev_corpus.empty()) dev_corpus = peft::load_text_corpus(ws.resolve(args.dev_corpus));

    std::optional<double> budget;
    if (args.budget_seconds >= 0) budget = args.budget_seconds;
    auto cfg = train_config_for(args.config.empty() ? "" : ws.resolve(args.config), peft::TrainMode::mlm_adapter,
                                budget);

    RunDir run(ws, "adapter-pretrain", cfg.seed);
    ManifestBuilder manifest(run.run_id(), "adapter-pretrain");
    manifest.input(ws.resolve(args.tokenizer));
    manifest.input(ws.resolve(args.corpus));
    manifest.config_snapshot(cfg.to_key_values());

    peft::EncoderWeights encoder;
    peft::AdapterStack stack;
    peft::TrainingState state;
    bool resuming = false;
    if (!args.resume.empty()) {
        state = peft::load_checkpoint(ws.resolve(args.resume));
        manifest.input(ws.resolve(args.resume));
        encoder = state.encoder;
        stack = state.stack;
        resuming = true;
    } else if (!args.encoder.empty()) {
        encoder = peft::load_encoder(ws.resolve(args.encoder));
        manifest.input(ws.resolve(args.encoder));
    } else {
        const auto config =
            resolve_encoder_config(args.init_config.empty() ? "" : ws.resolve(args.init_config), tokenizer);
        encoder = peft::init_encoder(config, args.init_seed);
    }
    if (!args.save_encoder_path.empty()) {
        const std::string enc_out = ws.resolve(args.save_encoder_path);
        if (const auto parent = fs::path(enc_out).parent_path(); !parent.empty()) fs::create_directories(parent);
        peft::save_encoder(encoder, enc_out);
        manifest.output(enc_out);
    }
    if (!resuming) {
        peft::AdapterConfig acfg;
        acfg.name = args.adapter_name;
        acfg.reduction_factor = args.reduction_factor;
        stack.push(peft::init_adapter(encoder.config, acfg, cfg.seed), true);
    }
    {
        const auto& acfg = stack.entries[0].weights.config;
        std::cout << "adapter \"" << acfg.name << "\": " << peft::adapter_param_count(encoder.config, acfg)
                  << " parameters, " << 100.0 * peft::adapter_param_ratio(encoder.config, acfg)
                  << "% of the encoder's " << peft::parameter_count(encoder.config) << "\n";
    }

    peft::MetricsSink sink(run.file("metrics.jsonl"), run.run_id());
    peft::MlmTrainOptions options;
    options.checkpoint_dir = run.dir().string();
    options.sink = &sink;
    options.resume = resuming ? &state : nullptr;
    if (args.session_steps >= 0) options.session_step_limit = static_cast<std::size_t>(args.session_steps);
    options.allow_config_change = args.allow_config_change;
    if (dev_corpus) {
        options.dev_corpus = &*dev_corpus;
        manifest.input(ws.resolve(args.dev_corpus));
    }

    const auto summary = peft::train_language_adapter(corpus, tokenizer, encoder, stack, cfg, options);
    manifest.output(run.file("metrics.jsonl"));
    manifest.output(summary.last_checkpoint);

    const std::string out_file =
        ws.resolve(args.out.empty() ? "adapters/" + args.adapter_name + ".adpt" : args.out);
    if (const auto parent = fs::path(out_file).parent_path(); !parent.empty()) fs::create_directories(parent);
    peft::save_adapter(stack.entries[0].weights, out_file);
    manifest.output(out_file);

    const int code = summary.status == peft::RunStatus::budget_stopped ? kExitBudget : kExitOk;
    manifest.write(run.file("manifest.json"), code);
    if (code == kExitBudget) {
        std::cout << "budget exhausted after " << summary.steps_completed << " steps; resumable from "
                  << summary.last_checkpoint << "\n";
    } else {
        std::cout << "adapter pre-training done: " << summary.steps_completed
                  << " steps, smoothed loss " << summary.final_smoothed_loss << " -> " << out_file << "\n";
    }
    return code;
}

struct NerFinetuneArgs {
    std::string mode, train, dev, test, language_adapter, tokenizer, encoder, config, language = "synthetic", results;
    std::size_t seeds = 3;
    bool unfreeze_language_adapter = false;
    double budget_seconds = -1.0;
    std::string save_task_adapter;
};

int cmd_ner_finetune(const Workspace& ws, const NerFinetuneArgs& args) {
    if (args.mode != "baseline" && args.mode != "adapter")
        throw peft::ConfigError("--mode must be baseline or adapter, got \"" + args.mode + "\"");
    const bool adapter_mode = args.mode == "adapter";
    if (adapter_mode && args.language_adapter.empty())
        throw peft::ConfigError("adapter mode requires --language-adapter");
    if (!adapter_mode && !args.language_adapter.empty())
        throw peft::ConfigError("baseline mode forbids --language-adapter");
    if (args.seeds == 0) throw peft::ConfigError("--seeds must be at least 1");

    const auto tokenizer = peft::SubwordModel::load(ws.resolve(args.tokenizer));
    const auto train_split = peft::load_conll(ws.resolve(args.train));
    const auto dev_split = peft::load_conll(ws.resolve(args.dev));
    const auto test_split = peft::load_conll(ws.resolve(args.test));

    std::optional<double> budget;
    if (args.budget_seconds >= 0) budget = args.budget_seconds;
    auto base_cfg = train_config_for(args.config.empty() ? "" : ws.resolve(args.config),
                                     adapter_mode ? peft::TrainMode::ner_adapter : peft::TrainMode::ner_baseline_full,
                                     budget);

    RunDir run(ws, "ner-finetune", base_cfg.seed);
    ManifestBuilder manifest(run.run_id(), "ner-finetune");
    for (const auto& p : {args.tokenizer, args.train, args.dev, args.test, args.encoder})
        manifest.input(ws.resolve(p));
    if (adapter_mode) manifest.input(ws.resolve(args.language_adapter));
    auto snapshot = base_cfg.to_key_values();
    snapshot["seeds"] = std::to_string(args.seeds);
    snapshot["language"] = args.language;
    snapshot["unfreeze_language_adapter"] = args.unfreeze_language_adapter ? "1" : "0";
    manifest.config_snapshot(snapshot);

    std::vector<SeedScore> scores;
    for (std::size_t k = 0; k < args.seeds; ++k) {
        auto cfg = base_cfg;
        cfg.seed = base_cfg.seed + k;

        auto encoder = peft::load_encoder(ws.resolve(args.encoder));
        if (encoder.config.vocab_size != tokenizer.vocab_size())
            throw peft::ConfigError("encoder vocab does not match the tokenizer");
        peft::AdapterStack stack;
        if (adapter_mode) {
            stack.push(peft::load_adapter(ws.resolve(args.language_adapter)), args.unfreeze_language_adapter);
            peft::AdapterConfig task_cfg;
            task_cfg.name = "task";
            task_cfg.reduction_factor = stack.entries[0].weights.config.reduction_factor;
            stack.push(peft::init_adapter(encoder.config, task_cfg, cfg.seed), true);
        }
        peft::NerHead head = peft::init_ner_head(encoder.config, peft::kNumLabels, cfg.seed);

        const std::string seed_dir = run.file("seed-" + std::to_string(cfg.seed));
        fs::create_directories(seed_dir);
        peft::MetricsSink sink(seed_dir + "/metrics.jsonl", run.run_id() + "-seed" + std::to_string(cfg.seed));
        peft::NerTrainOptions options;
        options.checkpoint_dir = seed_dir;
        options.sink = &sink;

        const auto summary =
            peft::train_ner(train_split, dev_split, test_split, tokenizer, encoder, stack, head, cfg, options);
        manifest.output(seed_dir + "/metrics.jsonl");
        if (summary.status == peft::RunStatus::budget_stopped) {
            manifest.write(run.file("manifest.json"), kExitBudget);
            std::cout << "budget exhausted during seed " << cfg.seed << " after " << summary.steps_completed
                      << " steps; resumable from " << summary.last_checkpoint << "\n";
            return kExitBudget;
        }
        scores.push_back({cfg.seed, summary.dev_f1, summary.test_f1, summary.best_dev_step});
        std::cout << "seed " << cfg.seed << ": dev F1 " << summary.dev_f1 << ", test F1 " << summary.test_f1
                  << " (best dev step " << summary.best_dev_step << ")\n";

        if (adapter_mode && k == 0 && !args.save_task_adapter.empty()) {
            const std::string task_out = ws.resolve(args.save_task_adapter);
            if (const auto parent = fs::path(task_out).parent_path(); !parent.empty())
                fs::create_directories(parent);
            peft::save_adapter(stack.entries.back().weights, task_out);
            manifest.output(task_out);
        }
    }

    const std::string results_dir = ws.resolve(args.results.empty() ? "results" : args.results);
    write_results_entry(results_dir, args.language, args.mode, scores);
    manifest.output(results_dir + "/" + args.language + "__" + args.mode + ".json");
    manifest.write(run.file("manifest.json"), kExitOk);

    double mean_dev = 0, mean_test = 0;
    for (const auto& s : scores) {
        mean_dev += s.dev_f1;
        mean_test += s.test_f1;
    }
    std::cout << args.language << " " << args.mode << ": mean dev F1 " << mean_dev / scores.size()
              << ", mean test F1 " << mean_test / scores.size() << " over " << scores.size() << " seed(s)\n";
    return kExitOk;
}

int cmd_report(const Workspace& ws, const std::string& results_dir_in, const std::string& out_path) {
    const std::string results_dir = ws.resolve(results_dir_in);
    if (!fs::is_directory(results_dir)) throw peft::DataError("results store \"" + results_dir + "\" does not exist");

    std::map<std::string, peft::LanguageScores> runs;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(results_dir))
        if (entry.path().extension() == ".json") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
        std::ifstream f(path);
        json doc = json::parse(f);
        if (doc.value("schema", "") != "peftlab-results-v1") continue;
        const std::string language = doc.at("language");
        const std::string mode = doc.at("mode");
        auto& cell = runs[language];
        if (mode == "baseline") {
            cell.baseline_dev = doc.at("mean_dev_f1").get<double>();
            cell.baseline_test = doc.at("mean_test_f1").get<double>();
        } else if (mode == "adapter") {
            cell.adapter_dev = doc.at("mean_dev_f1").get<double>();
            cell.adapter_test = doc.at("mean_test_f1").get<double>();
        }
    }
    if (runs.empty()) throw peft::DataError("results store \"" + results_dir + "\" has no result entries");

    const auto table = peft::build_results_table(runs);
    for (const auto& warning : table.warnings) std::cerr << "report: " << warning << "\n";
    const std::string text = table.render_text();
    std::cout << text;

    const std::string out_file = ws.resolve(out_path);
    if (const auto parent = fs::path(out_file).parent_path(); !parent.empty()) fs::create_directories(parent);
    {
        std::ofstream f(out_file, std::ios::binary | std::ios::trunc);
        f << text;
    }
    json doc;
    doc["schema"] = "peftlab-report-v1";
    doc["rows"] = json::object();
    const auto put = [](json& obj, const char* key, const std::optional<double>& v) {
        if (v) obj[key] = *v;
    };
    for (const auto& [language, scores] : table.rows) {
        json row = json::object();
        put(row, "baseline_dev", scores.baseline_dev);
        put(row, "baseline_test", scores.baseline_test);
        put(row, "adapter_dev", scores.adapter_dev);
        put(row, "adapter_test", scores.adapter_test);
        doc["rows"][language] = row;
    }
    json avg = json::object();
    put(avg, "baseline_dev", table.average.baseline_dev);
    put(avg, "baseline_test", table.average.baseline_test);
    put(avg, "adapter_dev", table.average.adapter_dev);
    put(avg, "adapter_test", table.average.adapter_test);
    doc["average"] = avg;
    {
        std::ofstream f(out_file + ".json", std::ios::binary | std::ios::trunc);
        f << doc.dump(2) << "\n";
    }
    return kExitOk;
}

int cmd_make_synthetic(const Workspace& ws, const std::string& out_dir, std::uint64_t seed, std::size_t sentences,
                       std::size_t ner_train, std::size_t ner_dev, std::size_t ner_test) {
    peft::SyntheticSpec spec;
    spec.seed = seed;
    spec.corpus_sentences = sentences;
    spec.ner_train = ner_train;
    spec.ner_dev = ner_dev;
    spec.ner_test = ner_test;
    const auto data = peft::make_synthetic(spec);
    const std::string dir = ws.resolve(out_dir);
    peft::write_synthetic(data, dir);
    std::cout << "synthetic data: " << data.corpus.size() << " corpus sentences, " << data.ner_train.size() << "/"
              << data.ner_dev.size() << "/" << data.ner_test.size() << " NER train/dev/test -> " << dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"peftlab: desk-scale language-adapter training and NER evaluation"};
    app.require_subcommand(1);

    Workspace ws;
    app.add_option("--workdir", ws.workdir, "Base directory for relative paths")->capture_default_str();

    // tokenizer-train
    std::string tt_corpus, tt_out;
    std::size_t tt_vocab = 8192;
    std::uint64_t tt_seed = 42;
    auto* tokenizer_train = app.add_subcommand("tokenizer-train", "Train a byte-level BPE tokenizer");
    tokenizer_train->add_option("--corpus", tt_corpus, "Text corpus, one sentence per line")->required();
    tokenizer_train->add_option("--vocab-size", tt_vocab, "Target vocabulary size")->capture_default_str();
    tokenizer_train->add_option("--out", tt_out, "Output tokenizer model path")->required();
    tokenizer_train->add_option("--seed", tt_seed, "Seed (recorded; training is deterministic)")->capture_default_str();

    // init-encoder
    std::string ie_tokenizer, ie_config, ie_out;
    std::uint64_t ie_seed = 42;
    auto* init_encoder_cmd = app.add_subcommand("init-encoder", "Initialize and save a fresh encoder");
    init_encoder_cmd->add_option("--tokenizer", ie_tokenizer, "Tokenizer model (fixes the vocabulary)")->required();
    init_encoder_cmd->add_option("--init-config", ie_config, "Encoder architecture key=value file");
    init_encoder_cmd->add_option("--out", ie_out, "Output encoder weights path")->required();
    init_encoder_cmd->add_option("--seed", ie_seed, "Init seed")->capture_default_str();

    // adapter-pretrain
    AdapterPretrainArgs ap;
    auto* adapter_pretrain = app.add_subcommand("adapter-pretrain", "Pre-train a language adapter with MLM");
    adapter_pretrain->add_option("--corpus", ap.corpus, "Target-language text corpus")->required();
    adapter_pretrain->add_option("--dev-corpus", ap.dev_corpus, "Held-out corpus for dev-loss model selection");
    adapter_pretrain->add_option("--tokenizer", ap.tokenizer, "Tokenizer model")->required();
    adapter_pretrain->add_option("--encoder", ap.encoder, "Base encoder weights file");
    adapter_pretrain->add_option("--init-config", ap.init_config, "Encoder architecture file (fresh encoder)");
    adapter_pretrain->add_option("--init-seed", ap.init_seed, "Seed for a fresh encoder")->capture_default_str();
    adapter_pretrain->add_option("--adapter-name", ap.adapter_name, "Adapter name")->capture_default_str();
    adapter_pretrain->add_option("--reduction-factor", ap.reduction_factor, "Bottleneck reduction factor")
        ->capture_default_str();
    adapter_pretrain->add_option("--config", ap.config, "Training config key=value file");
    adapter_pretrain->add_option("--budget-seconds", ap.budget_seconds, "Wall-clock budget (overrides config)");
    adapter_pretrain->add_option("--resume", ap.resume, "Resume from a checkpoint file");
    adapter_pretrain->add_flag("--allow-config-change", ap.allow_config_change,
                               "Resume even if the config hash differs from the checkpoint");
    adapter_pretrain->add_option("--out", ap.out, "Output adapter path (default adapters/<name>.adpt)");
    adapter_pretrain->add_option("--save-encoder", ap.save_encoder_path, "Also save the base encoder weights");
    adapter_pretrain->add_option("--session-steps", ap.session_steps, "Stop (resumable) after this many steps")
        ->group("");

    // ner-finetune
    NerFinetuneArgs nf;
    auto* ner_finetune = app.add_subcommand("ner-finetune", "Fine-tune NER (baseline or adapter mode)");
    ner_finetune->add_option("--mode", nf.mode, "baseline (full fine-tuning) or adapter")->required();
    ner_finetune->add_option("--train", nf.train, "CoNLL train split")->required();
    ner_finetune->add_option("--dev", nf.dev, "CoNLL dev split")->required();
    ner_finetune->add_option("--test", nf.test, "CoNLL test split")->required();
    ner_finetune->add_option("--language-adapter", nf.language_adapter, "Pre-trained language adapter (adapter mode)");
    ner_finetune->add_option("--tokenizer", nf.tokenizer, "Tokenizer model")->required();
    ner_finetune->add_option("--encoder", nf.encoder, "Base encoder weights file")->required();
    ner_finetune->add_option("--config", nf.config, "Training config key=value file");
    ner_finetune->add_option("--seeds", nf.seeds, "Number of seeds; scores are averaged")->capture_default_str();
    ner_finetune->add_option("--language", nf.language, "Language name for the results store")->capture_default_str();
    ner_finetune->add_option("--results", nf.results, "Results store directory (default results/)");
    ner_finetune->add_option("--budget-seconds", nf.budget_seconds, "Wall-clock budget (overrides config)");
    ner_finetune->add_option("--save-task-adapter", nf.save_task_adapter, "Save the first seed's task adapter");
    ner_finetune->add_flag("--unfreeze-language-adapter", nf.unfreeze_language_adapter,
                           "Also train the language adapter in adapter mode");

    // report
    std::string rp_results = "results", rp_out = "report.txt";
    auto* report = app.add_subcommand("report", "Render the per-language results table");
    report->add_option("--results", rp_results, "Results store directory")->capture_default_str();
    report->add_option("--out", rp_out, "Output text path (structured copy at <out>.json)")->capture_default_str();

    // make-synthetic (hidden): deterministic corpora for acceptance runs
    std::string ms_out = "synthetic";
    std::uint64_t ms_seed = 13;
    std::size_t ms_sentences = 1000, ms_train = 600, ms_dev = 150, ms_test = 250;
    auto* make_synth = app.add_subcommand("make-synthetic", "Generate deterministic synthetic corpora");
    make_synth->group("");
    make_synth->add_option("--out-dir", ms_out, "Output directory")->capture_default_str();
    make_synth->add_option("--seed", ms_seed, "Generator seed")->capture_default_str();
    make_synth->add_option("--sentences", ms_sentences, "Corpus sentences")->capture_default_str();
    make_synth->add_option("--ner-train", ms_train, "NER train sentences")->capture_default_str();
    make_synth->add_option("--ner-dev", ms_dev, "NER dev sentences")->capture_default_str();
    make_synth->add_option("--ner-test", ms_test, "NER test sentences")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(tokenizer_train)) return cmd_tokenizer_train(ws, tt_corpus, tt_vocab, tt_out, tt_seed);
        if (app.got_subcommand(init_encoder_cmd)) return cmd_init_encoder(ws, ie_tokenizer, ie_config, ie_out, ie_seed);
        if (app.got_subcommand(adapter_pretrain)) return cmd_adapter_pretrain(ws, ap);
        if (app.got_subcommand(ner_finetune)) return cmd_ner_finetune(ws, nf);
        if (app.got_subcommand(report)) return cmd_report(ws, rp_results, rp_out);
        if (app.got_subcommand(make_synth))
            return cmd_make_synthetic(ws, ms_out, ms_seed, ms_sentences, ms_train, ms_dev, ms_test);
    } catch (const peft::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const peft::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
