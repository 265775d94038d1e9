// Command-line surface for the compressive-memory retrieval engine:
// data generation, training, inference, evaluation, experiment sweeps and
// property verification.
//
// Exit codes: 0 success, 1 verification failure, 2 usage error,
// 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmr/data.hpp"
#include "cmr/memory.hpp"
#include "cmr/model.hpp"
#include "cmr/pipeline.hpp"
#include "cmr/retriever.hpp"
#include "cmr/serialize.hpp"
#include "cmr/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "cmr-0.3.0";

std::uint64_t env_fallback_seed(std::uint64_t flag_default) {
    const char* env = std::getenv("CMR_SEED");
    if (env == nullptr) return flag_default;
    return static_cast<std::uint64_t>(std::strtoull(env, nullptr, 10));
}

void write_manifest(const std::string& out_dir, const std::string& command,
                    const json& config, const std::vector<std::string>& outputs) {
    json m;
    m["command"] = command;
    m["config"] = config;
    m["seed"] = config.value("seed", std::uint64_t{0});
    m["version"] = kVersion;
    m["outputs"] = outputs;
    std::ofstream f(out_dir + "/manifest.json", std::ios::binary);
    if (!f) throw cmr::IoError("cannot write manifest to " + out_dir);
    f << m.dump(2) << "\n";
}

struct DataDir {
    std::vector<cmr::EventInstance> train, dev, test;
    cmr::Ontology ontology;
};

DataDir load_data_dir(const std::string& dir) {
    DataDir d;
    d.train = cmr::read_instances_jsonl(dir + "/train.jsonl");
    d.dev = cmr::read_instances_jsonl(dir + "/dev.jsonl");
    d.test = cmr::read_instances_jsonl(dir + "/test.jsonl");
    d.ontology = cmr::Ontology::from_json(cmr::read_file_bytes(dir +
                                                               "/ontology.json"));
    return d;
}

cmr::Model load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw cmr::IoError("missing checkpoint: " + path);
    return cmr::Model::load(f);
}

std::string join_words(const std::vector<std::string>& ws) {
    std::string out;
    for (std::size_t i = 0; i < ws.size(); ++i) {
        if (i) out += ' ';
        out += ws[i];
    }
    return out;
}

void write_predictions_jsonl(const std::string& path,
                             const std::vector<cmr::PredRecord>& preds,
                             const std::vector<std::vector<std::string>>& gen) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw cmr::IoError("cannot write " + path);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        json j;
        j["doc_id"] = preds[i].doc_id;
        j["event_index"] = preds[i].event_index;
        json roles = json::object();
        for (const auto& [role, toks] : preds[i].pred.roles)
            roles[role] = join_words(toks);
        j["roles"] = roles;
        j["generated"] = join_words(gen.at(i));
        f << j.dump() << "\n";
    }
}

std::vector<cmr::PredRecord> read_predictions_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw cmr::IoError("cannot open " + path);
    std::vector<cmr::PredRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        cmr::PredRecord r;
        r.doc_id = j.at("doc_id").get<std::string>();
        r.event_index = j.at("event_index").get<std::size_t>();
        for (auto it = j.at("roles").begin(); it != j.at("roles").end(); ++it) {
            std::vector<std::string> toks;
            std::istringstream is(it.value().get<std::string>());
            std::string w;
            while (is >> w) toks.push_back(w);
            r.pred.roles[it.key()] = std::move(toks);
        }
        out.push_back(std::move(r));
    }
    return out;
}

const char* kSweepHeader =
    "mode,k,order,seed,arg_i_f1,arg_c_f1,strict_f1,relaxed_f1,wall_ms\n";

void append_sweep_row(std::ostream& os, const std::string& mode, std::size_t k,
                      const std::string& order, std::uint64_t seed,
                      const cmr::MetricReport& rep, double wall_ms) {
    os << mode << ',' << k << ',' << order << ',' << seed << ','
       << rep.arg_i_f1 << ',' << rep.arg_c_f1 << ',' << rep.strict_f1 << ','
       << rep.relaxed_f1 << ',' << wall_ms << "\n";
}

// ---- command handlers (config-driven so `rerun` can replay a manifest) ----

int run_gen_data(const json& cfg) {
    cmr::GeneratorConfig g;
    g.seed = cfg.at("seed").get<std::uint64_t>();
    g.n_train = cfg.at("n_train").get<std::size_t>();
    g.n_dev = cfg.at("n_dev").get<std::size_t>();
    g.n_test = cfg.at("n_test").get<std::size_t>();
    const std::string out = cfg.at("out").get<std::string>();
    if (g.n_train == 0 || g.n_dev == 0 || g.n_test == 0) {
        std::cerr << "gen-data: split sizes must be >= 1\n";
        return 2;
    }
    cmr::World world = cfg.contains("ontology") && !cfg.at("ontology").is_null()
                           ? cmr::World::for_ontology(cmr::Ontology::from_json(
                                 cmr::read_file_bytes(
                                     cfg.at("ontology").get<std::string>())))
                           : cmr::World::builtin();
    cmr::generate_corpus(g, world, out);
    write_manifest(out, "gen-data", cfg,
                   {out + "/train.jsonl", out + "/dev.jsonl",
                    out + "/test.jsonl", out + "/ontology.json"});
    std::cout << "wrote " << g.n_train << "/" << g.n_dev << "/" << g.n_test
              << " instances to " << out << "\n";
    return 0;
}

int run_train(const json& cfg) {
    const std::string data_dir = cfg.at("data").get<std::string>();
    const std::string out = cfg.at("out").get<std::string>();
    DataDir d = load_data_dir(data_dir);
    cmr::Vocab vocab = cmr::Vocab::build(d.ontology, d.train);

    cmr::ModelConfig mc;
    mc.variant = cmr::variant_from_name(cfg.at("variant").get<std::string>());
    mc.d_model = cfg.at("d_model").get<std::size_t>();
    mc.num_heads = cfg.at("heads").get<std::size_t>();
    mc.num_layers = cfg.at("layers").get<std::size_t>();
    mc.feed_forward_dim = cfg.at("ff").get<std::size_t>();
    mc.max_seq_len = cfg.at("max_seq_len").get<std::size_t>();
    mc.vocab_size = vocab.size();
    mc.seed = cfg.at("seed").get<std::uint64_t>();
    mc.tie_embedding = cfg.at("tie_embedding").get<bool>();

    cmr::TrainConfig tc;
    tc.epochs = cfg.at("epochs").get<std::size_t>();
    tc.batch_size = cfg.at("batch_size").get<std::size_t>();
    tc.grad_accum_steps = cfg.at("grad_accum").get<std::size_t>();
    tc.max_retrieval = cfg.at("max_retrieval").get<std::size_t>();
    tc.learning_rate = cfg.at("lr").get<double>();
    tc.warmup_ratio = cfg.at("warmup").get<double>();
    tc.seed = cfg.at("seed").get<std::uint64_t>();
    tc.mix_fraction = cfg.at("mix").get<double>();
    tc.combine = cmr::combine_from_name(cfg.at("combine").get<std::string>());
    tc.arch = cmr::arch_from_name(cfg.at("arch").get<std::string>());
    tc.optimizer =
        cmr::optimizer_from_name(cfg.at("optimizer").get<std::string>());

    if (tc.max_retrieval != tc.grad_accum_steps)
        std::cerr << "warning: --max-retrieval (" << tc.max_retrieval
                  << ") differs from --grad-accum (" << tc.grad_accum_steps
                  << "); training ties memory cycles to parameter updates\n";

    fs::create_directories(out);
    cmr::Model model(mc);
    cmr::RetrievalIndex index(256);
    const cmr::RetrievalIndex* index_ptr = nullptr;
    if (tc.arch == cmr::ArchMode::kPrefixRag) {
        index = cmr::build_index(d.train, d.ontology);
        index_ptr = &index;
    }
    cmr::TrainResult res =
        cmr::train(model, d.train, d.ontology, vocab, tc, index_ptr);

    {
        std::ofstream f(out + "/checkpoint.bin", std::ios::binary);
        if (!f) throw cmr::IoError("cannot write checkpoint to " + out);
        model.save(f);
    }
    {
        std::ofstream f(out + "/metrics.csv", std::ios::binary);
        f << "step,loss,lr,stored_count,cycle_id\n";
        for (const auto& row : res.log)
            f << row.step << ',' << row.loss << ',' << row.lr << ','
              << row.stored_count << ',' << row.cycle_id << "\n";
    }
    write_manifest(out, "train", cfg,
                   {out + "/checkpoint.bin", out + "/metrics.csv"});
    std::cout << "trained " << res.updates << " updates; loss "
              << res.initial_loss << " -> " << res.final_loss << "\n";
    return 0;
}

cmr::InferenceConfig inference_config_from(const json& cfg) {
    cmr::InferenceConfig ic;
    ic.k = cfg.at("k").get<std::size_t>();
    ic.demo_batch_size = cfg.at("demo_batch").get<std::size_t>();
    ic.retrieval_mode =
        cmr::retrieval_mode_from_name(cfg.at("mode").get<std::string>());
    ic.demo_order =
        cmr::demo_order_from_name(cfg.at("order").get<std::string>());
    ic.seed = cfg.at("seed").get<std::uint64_t>();
    ic.combine = cmr::combine_from_name(cfg.at("combine").get<std::string>());
    ic.arch = cmr::arch_from_name(cfg.at("arch").get<std::string>());
    ic.store_predictions = cfg.at("store_predictions").get<bool>();
    return ic;
}

int run_infer(const json& cfg) {
    const std::string out = cfg.at("out").get<std::string>();
    DataDir d = load_data_dir(cfg.at("data").get<std::string>());
    cmr::Model model = load_checkpoint(cfg.at("ckpt").get<std::string>());
    cmr::Vocab vocab = cmr::Vocab::build(d.ontology, d.train);
    if (vocab.size() != model.config().vocab_size)
        throw cmr::ValueError(
            "vocabulary rebuilt from --data does not match the checkpoint "
            "(sizes " + std::to_string(vocab.size()) + " vs " +
            std::to_string(model.config().vocab_size) + ")");
    cmr::RetrievalIndex index = cmr::build_index(d.train, d.ontology);
    cmr::InferenceConfig ic = inference_config_from(cfg);
    const std::string split = cfg.at("split").get<std::string>();
    const std::vector<cmr::EventInstance>& eval_set =
        split == "dev" ? d.dev : d.test;

    cmr::EvalRunResult res =
        cmr::run_eval(model, eval_set, index, d.ontology, vocab, ic);
    fs::create_directories(out);
    write_predictions_jsonl(out + "/predictions.jsonl", res.predictions,
                            res.generated);
    {
        std::ofstream f(out + "/metrics.csv", std::ios::binary);
        f << kSweepHeader;
        append_sweep_row(f, cmr::arch_name(ic.arch) + ":" +
                                cmr::retrieval_mode_name(ic.retrieval_mode),
                         ic.k, cmr::demo_order_name(ic.demo_order), ic.seed,
                         res.report, res.wall_ms_total);
    }
    write_manifest(out, "infer", cfg,
                   {out + "/predictions.jsonl", out + "/metrics.csv"});
    std::cout << "strict_f1=" << res.report.strict_f1
              << " relaxed_f1=" << res.report.relaxed_f1
              << " arg_i_f1=" << res.report.arg_i_f1
              << " arg_c_f1=" << res.report.arg_c_f1 << "\n";
    return 0;
}

int run_eval_cmd(const json& cfg) {
    DataDir d = load_data_dir(cfg.at("data").get<std::string>());
    const std::string split = cfg.at("split").get<std::string>();
    const std::vector<cmr::EventInstance>& gold =
        split == "dev" ? d.dev : d.test;
    std::vector<cmr::PredRecord> preds =
        read_predictions_jsonl(cfg.at("pred").get<std::string>());
    cmr::MetricReport rep = cmr::evaluate(preds, gold, d.ontology);
    std::cout << "arg_i_f1=" << rep.arg_i_f1 << " arg_c_f1=" << rep.arg_c_f1
              << " strict_f1=" << rep.strict_f1
              << " relaxed_f1=" << rep.relaxed_f1 << "\n";
    if (cfg.contains("out") && !cfg.at("out").is_null()) {
        const std::string out = cfg.at("out").get<std::string>();
        fs::create_directories(out);
        std::ofstream f(out + "/metrics.csv", std::ios::binary);
        f << kSweepHeader;
        append_sweep_row(f, "eval", 0, "normal", 0, rep, 0.0);
        write_manifest(out, "eval", cfg, {out + "/metrics.csv"});
    }
    return 0;
}

int run_experiment(const json& cfg) {
    const std::string kind = cfg.at("kind").get<std::string>();
    const std::string out = cfg.at("out").get<std::string>();
    DataDir d = load_data_dir(cfg.at("data").get<std::string>());
    cmr::Model model = load_checkpoint(cfg.at("ckpt").get<std::string>());
    cmr::Vocab vocab = cmr::Vocab::build(d.ontology, d.train);
    cmr::RetrievalIndex index = cmr::build_index(d.train, d.ontology);
    std::vector<std::uint64_t> seeds =
        cfg.at("seeds").get<std::vector<std::uint64_t>>();

    fs::create_directories(out);
    std::ofstream f(out + "/sweep.csv", std::ios::binary);
    f << kSweepHeader;

    auto run_cell = [&](const cmr::Model& m, cmr::ArchMode arch,
                        cmr::RetrievalMode mode, std::size_t k,
                        cmr::DemoOrder order, std::uint64_t seed,
                        const std::string& mode_label) {
        cmr::InferenceConfig ic = inference_config_from(cfg);
        ic.arch = arch;
        ic.retrieval_mode = mode;
        ic.k = k;
        ic.demo_order = order;
        ic.seed = seed;
        cmr::EvalRunResult res =
            cmr::run_eval(m, d.test, index, d.ontology, vocab, ic);
        append_sweep_row(f, mode_label, k, cmr::demo_order_name(order), seed,
                         res.report, res.wall_ms_total);
        f.flush();
    };

    if (kind == "count") {
        for (std::uint64_t seed : seeds)
            for (std::size_t k : {0, 1, 5, 10, 15})
                run_cell(model, cmr::ArchMode::kCmr,
                         k == 0 ? cmr::RetrievalMode::kNone
                                : cmr::RetrievalMode::kTopk,
                         k, cmr::DemoOrder::kNormal, seed, "cmr:topk");
    } else if (kind == "order") {
        const std::size_t k = cfg.at("k").get<std::size_t>();
        for (std::uint64_t seed : seeds)
            for (cmr::DemoOrder order :
                 {cmr::DemoOrder::kNormal, cmr::DemoOrder::kReverse,
                  cmr::DemoOrder::kShuffle})
                run_cell(model, cmr::ArchMode::kCmr, cmr::RetrievalMode::kTopk,
                         k, order, seed, "cmr:topk");
    } else if (kind == "robustness") {
        const std::size_t k = cfg.at("k").get<std::size_t>();
        cmr::Model baseline =
            load_checkpoint(cfg.at("baseline_ckpt").get<std::string>());
        for (std::uint64_t seed : seeds) {
            run_cell(model, cmr::ArchMode::kCmr, cmr::RetrievalMode::kTopk, k,
                     cmr::DemoOrder::kNormal, seed, "cmr:topk");
            run_cell(model, cmr::ArchMode::kCmr, cmr::RetrievalMode::kRandom,
                     k, cmr::DemoOrder::kNormal, seed, "cmr:random");
            run_cell(baseline, cmr::ArchMode::kPrefixRag,
                     cmr::RetrievalMode::kTopk, 1, cmr::DemoOrder::kNormal,
                     seed, "prefix:topk");
            run_cell(baseline, cmr::ArchMode::kPrefixRag,
                     cmr::RetrievalMode::kRandom, 1, cmr::DemoOrder::kNormal,
                     seed, "prefix:random");
        }
    } else {
        std::cerr << "unknown experiment kind '" << kind
                  << "' (want count|order|robustness)\n";
        return 2;
    }
    write_manifest(out, "experiment", cfg, {out + "/sweep.csv"});
    std::cout << "sweep written to " << out << "/sweep.csv\n";
    return 0;
}

int run_verify_cmd(const json& cfg) {
    if (cfg.contains("epsilon"))
        cmr::set_retrieval_epsilon(cfg.at("epsilon").get<double>());
    std::vector<std::string> only;
    if (cfg.contains("only"))
        only = cfg.at("only").get<std::vector<std::string>>();
    std::vector<cmr::CheckResult> results = cmr::run_verification(only);
    if (results.empty()) {
        std::cerr << "verify: no checks matched --only filter\n";
        return 2;
    }
    bool all_ok = true;
    for (const cmr::CheckResult& r : results) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name
                  << " (max err " << r.max_err << "): " << r.detail << "\n";
        all_ok = all_ok && r.passed;
    }
    return all_ok ? 0 : 1;
}

int dispatch(const std::string& command, const json& cfg) {
    if (command == "gen-data") return run_gen_data(cfg);
    if (command == "train") return run_train(cfg);
    if (command == "infer") return run_infer(cfg);
    if (command == "eval") return run_eval_cmd(cfg);
    if (command == "experiment") return run_experiment(cfg);
    if (command == "verify") return run_verify_cmd(cfg);
    std::cerr << "unknown command '" << command << "'\n";
    return 2;
}

int run_rerun(const std::string& manifest_path) {
    json m = json::parse(cmr::read_file_bytes(manifest_path));
    return dispatch(m.at("command").get<std::string>(), m.at("config"));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Compressive-memory retrieval engine for event argument "
                 "extraction"};
    app.require_subcommand(1);
    json cfg;
    std::string command;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic corpus");
    std::string gen_out = "data";
    std::size_t n_train = 2000, n_dev = 300, n_test = 300;
    std::uint64_t gen_seed = env_fallback_seed(7);
    std::string gen_ontology;
    gen->add_option("--out", gen_out, "Output directory");
    gen->add_option("--n-train", n_train, "Training documents (default 2000)");
    gen->add_option("--n-dev", n_dev, "Dev documents (default 300)");
    gen->add_option("--n-test", n_test, "Test documents (default 300)");
    gen->add_option("--seed", gen_seed, "Generator seed (default 7)");
    gen->add_option("--ontology", gen_ontology,
                    "Ontology JSON (default: builtin 6-type ontology)");
    gen->callback([&]() {
        command = "gen-data";
        cfg = {{"out", gen_out},   {"n_train", n_train}, {"n_dev", n_dev},
               {"n_test", n_test}, {"seed", gen_seed}};
        if (!gen_ontology.empty()) cfg["ontology"] = gen_ontology;
    });

    // train
    auto* tr = app.add_subcommand("train", "Train a model (Algorithm 1 "
                                           "memory cycles for the cmr arch)");
    std::string tr_data = "data", tr_out = "run", tr_variant = "encdec";
    std::string tr_arch = "cmr", tr_combine = "mean", tr_opt = "adam";
    std::size_t tr_epochs = 4, tr_batch = 4, tr_accum = 8, tr_maxret = 8;
    std::size_t tr_dmodel = 32, tr_heads = 4, tr_layers = 2, tr_ff = 64;
    std::size_t tr_maxseq = 224;
    double tr_lr = 3e-3, tr_warmup = 0.1, tr_mix = 0.2;
    std::uint64_t tr_seed = env_fallback_seed(1);
    bool tr_tie = false;
    tr->add_option("--data", tr_data, "Data directory (from gen-data)");
    tr->add_option("--out", tr_out, "Output directory");
    tr->add_option("--variant", tr_variant, "encdec|deconly (default encdec)");
    tr->add_option("--arch", tr_arch, "cmr|prefix (default cmr)");
    tr->add_option("--epochs", tr_epochs, "Training epochs (default 4)");
    tr->add_option("--batch-size", tr_batch, "Batch size (default 4)");
    tr->add_option("--grad-accum", tr_accum,
                   "Gradient accumulation steps (default 8)");
    tr->add_option("--max-retrieval", tr_maxret,
                   "Memory reset cycle length (default 8)");
    tr->add_option("--lr", tr_lr, "Learning rate (default 3e-3)");
    tr->add_option("--warmup", tr_warmup, "Warmup ratio (default 0.1)");
    tr->add_option("--mix", tr_mix,
                   "Off-type fraction for batch reranking (default 0.2)");
    tr->add_option("--seed", tr_seed, "Seed (default 1, or CMR_SEED)");
    tr->add_option("--combine", tr_combine,
                   "Batch memory combination mean|sum (default mean)");
    tr->add_option("--optimizer", tr_opt, "sgd|adam (default adam)");
    tr->add_option("--d-model", tr_dmodel, "Model width (default 32)");
    tr->add_option("--heads", tr_heads, "Attention heads (default 4)");
    tr->add_option("--layers", tr_layers, "Layers per stack (default 2)");
    tr->add_option("--ff", tr_ff, "Feed-forward width (default 64)");
    tr->add_option("--max-seq-len", tr_maxseq,
                   "Maximum sequence length (default 224)");
    tr->add_flag("--tie-embedding", tr_tie, "Tie output head to embedding");
    tr->callback([&]() {
        command = "train";
        cfg = {{"data", tr_data},
               {"out", tr_out},
               {"variant", tr_variant},
               {"arch", tr_arch},
               {"epochs", tr_epochs},
               {"batch_size", tr_batch},
               {"grad_accum", tr_accum},
               {"max_retrieval", tr_maxret},
               {"lr", tr_lr},
               {"warmup", tr_warmup},
               {"mix", tr_mix},
               {"seed", tr_seed},
               {"combine", tr_combine},
               {"optimizer", tr_opt},
               {"d_model", tr_dmodel},
               {"heads", tr_heads},
               {"layers", tr_layers},
               {"ff", tr_ff},
               {"max_seq_len", tr_maxseq},
               {"tie_embedding", tr_tie}};
    });

    // shared inference flags
    std::string in_ckpt, in_data = "data", in_out = "infer_out";
    std::string in_mode = "topk", in_order = "normal", in_combine = "mean";
    std::string in_arch = "cmr", in_split = "test";
    std::size_t in_k = 0, in_demo_batch = 4;
    std::uint64_t in_seed = env_fallback_seed(1);
    bool in_store_pred = false;
    auto add_infer_flags = [&](CLI::App* c) {
        c->add_option("--ckpt", in_ckpt, "Checkpoint file")->required();
        c->add_option("--data", in_data, "Data directory");
        c->add_option("--out", in_out, "Output directory");
        c->add_option("--k", in_k, "Demonstrations to retrieve (default 0)");
        c->add_option("--demo-batch", in_demo_batch,
                      "Demonstration batch size (default 4)");
        c->add_option("--mode", in_mode, "topk|random|none (default topk)");
        c->add_option("--order", in_order,
                      "normal|reverse|shuffle (default normal)");
        c->add_option("--seed", in_seed, "Seed (default 1, or CMR_SEED)");
        c->add_option("--combine", in_combine, "mean|sum (default mean)");
        c->add_option("--arch", in_arch, "cmr|prefix (default cmr)");
        c->add_option("--split", in_split, "test|dev (default test)");
        c->add_flag("--store-predictions", in_store_pred,
                    "Append each demo's own predictions before storing it");
    };
    auto infer_cfg = [&]() {
        return json{{"ckpt", in_ckpt},
                    {"data", in_data},
                    {"out", in_out},
                    {"k", in_k},
                    {"demo_batch", in_demo_batch},
                    {"mode", in_mode},
                    {"order", in_order},
                    {"seed", in_seed},
                    {"combine", in_combine},
                    {"arch", in_arch},
                    {"split", in_split},
                    {"store_predictions", in_store_pred}};
    };

    auto* inf = app.add_subcommand(
        "infer", "Retrieve, preload memory and decode the eval split "
                 "(Algorithm 2)");
    add_infer_flags(inf);
    inf->callback([&]() {
        command = "infer";
        cfg = infer_cfg();
    });

    // eval
    auto* ev = app.add_subcommand("eval",
                                  "Score a predictions file against gold");
    std::string ev_pred, ev_data = "data", ev_split = "test", ev_out;
    ev->add_option("--pred", ev_pred, "predictions.jsonl")->required();
    ev->add_option("--data", ev_data, "Data directory");
    ev->add_option("--split", ev_split, "test|dev (default test)");
    ev->add_option("--out", ev_out, "Optional output directory");
    ev->callback([&]() {
        command = "eval";
        cfg = {{"pred", ev_pred}, {"data", ev_data}, {"split", ev_split}};
        if (!ev_out.empty()) cfg["out"] = ev_out;
    });

    // experiment
    auto* ex = app.add_subcommand("experiment",
                                  "Sweeps: count, order, robustness");
    std::string ex_kind, ex_baseline;
    std::vector<std::uint64_t> ex_seeds{1, 2, 3};
    std::size_t ex_k = 5;
    ex->add_option("kind", ex_kind, "count|order|robustness")->required();
    add_infer_flags(ex);
    ex->add_option("--sweep-k", ex_k,
                   "k for order/robustness sweeps (default 5)");
    ex->add_option("--seeds", ex_seeds, "Seed list (default 1 2 3)");
    ex->add_option("--baseline-ckpt", ex_baseline,
                   "Prefix-RAG checkpoint (robustness)");
    ex->callback([&]() {
        command = "experiment";
        cfg = infer_cfg();
        cfg["kind"] = ex_kind;
        cfg["k"] = ex_k;
        cfg["seeds"] = ex_seeds;
        if (!ex_baseline.empty()) cfg["baseline_ckpt"] = ex_baseline;
    });

    // verify
    auto* ver = app.add_subcommand(
        "verify", "Gradient checks, algorithm oracles and invariants");
    std::vector<std::string> ver_only;
    double ver_eps = cmr::retrieval_epsilon();
    ver->add_option("--only", ver_only,
                    "Run only the named checks (gradcheck alg1 alg2 "
                    "linear_attention permutation empty_memory)");
    ver->add_option("--epsilon", ver_eps,
                    "Retrieval epsilon override (fault injection)");
    ver->callback([&]() {
        command = "verify";
        cfg = {{"epsilon", ver_eps}};
        if (!ver_only.empty()) cfg["only"] = ver_only;
    });

    // rerun
    auto* rr = app.add_subcommand("rerun",
                                  "Re-execute a command from its manifest");
    std::string rr_manifest;
    rr->add_option("--manifest", rr_manifest, "manifest.json path")
        ->required();
    rr->callback([&]() { command = "rerun"; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;  // usage errors are exit code 2
    }

    try {
        if (command == "rerun") return run_rerun(rr_manifest);
        return dispatch(command, cfg);
    } catch (const cmr::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
