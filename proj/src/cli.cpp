#include "gbt/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>

#include <CLI11.hpp>
#include <json.hpp>

#include "gbt/gradcheck.hpp"
#include "gbt/metrics.hpp"
#include "gbt/network.hpp"
#include "gbt/phantom.hpp"
#include "gbt/rng.hpp"
#include "gbt/stats.hpp"
#include "gbt/training.hpp"
#include "gbt/volume.hpp"

namespace gbt {

namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void echo_config(const std::string& command, std::uint64_t seed,
                 const ordered_json& config) {
    ordered_json line{{"command", command}, {"seed", seed}, {"config", config}};
    std::cout << line.dump() << "\n";
}

std::string stars(double p) {
    if (p < 0.01) return "\xe2\x80\xa0";  // †
    if (p < 0.05) return "*";
    return "";
}

ordered_json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open " + path);
    try {
        return ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw UsageError("bad JSON in " + path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

struct PhantomArgs {
    std::string out_dir;
    int cases = 50;
    std::uint64_t seed = 7;
    int dim = 64;
    double spacing = 1.5;
    double noise_sd = 8.0;
};

int run_phantom(const PhantomArgs& args) {
    PhantomSpec spec;
    spec.dims = {args.dim, args.dim, args.dim};
    spec.spacing_mm = args.spacing;
    spec.noise_sd = args.noise_sd;
    spec.rng_seed = args.seed;
    echo_config("phantom", args.seed,
                ordered_json{{"out", args.out_dir},
                             {"cases", args.cases},
                             {"dims", spec.dims},
                             {"spacing_mm", spec.spacing_mm},
                             {"noise_sd", spec.noise_sd}});
    write_cohort(spec, args.cases, args.out_dir);
    std::cout << "wrote " << args.cases << " cases to " << args.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// pretrain / finetune
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config_path;
    std::string stage;  // empty for pretrain
    std::string init = "none";
    std::string cohort;
    std::string out;
    std::string log;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs;
    std::optional<int> steps;
    std::optional<int> batch;
    std::optional<double> lr_max;
    bool deterministic = false;
    std::optional<int> threads;
};

int run_train(const std::string& command, const TrainArgs& args) {
    TrainConfig config = command == "pretrain"
                             ? desk_pretrain_config()
                             : desk_finetune_config(
                                   args.stage.empty() ? "task" : args.stage);
    if (!args.config_path.empty())
        config = train_config_from_json(read_json_file(args.config_path));
    if (!args.stage.empty()) config.stage = args.stage;
    if (command == "pretrain") config.stage = "pretrain";
    if (!args.cohort.empty()) config.cohort = args.cohort;
    if (!args.out.empty()) config.out_checkpoint = args.out;
    if (!args.log.empty()) config.log_path = args.log;
    if (args.seed) config.seed = *args.seed;
    if (args.epochs) config.epochs = *args.epochs;
    if (args.steps) config.steps_per_epoch = *args.steps;
    if (args.batch) config.batch_size = *args.batch;
    if (args.lr_max) config.lr_max = *args.lr_max;
    if (args.deterministic) {
        config.deterministic = true;
        config.threads = 1;
    }
    if (args.threads) config.threads = *args.threads;
    if (args.init != "none" && command == "pretrain")
        throw UsageError("pretrain takes no --init checkpoint");
    if (!args.init.empty() && args.init != "none")
        config.init_checkpoint = args.init;

    try {
        config.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (config.cohort.empty()) throw UsageError("missing --cohort");
    echo_config(command, config.seed, train_config_to_json(config));

    std::optional<Checkpoint> init;
    if (!config.init_checkpoint.empty())
        init = load_checkpoint(config.init_checkpoint);
    TrainResult result = run_stage(config, init ? &*init : nullptr);
    const double final_loss =
        result.log.empty() ? 0.0 : result.log.back().loss;
    std::cout << "stage " << config.stage << " done, final mean loss "
              << final_loss << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

struct SegmentArgs {
    std::string ckpt;
    std::string input;
    std::string output;
    double target_spacing = 1.5;
};

int run_segment(const SegmentArgs& args) {
    echo_config("segment", 0,
                ordered_json{{"ckpt", args.ckpt},
                             {"in", args.input},
                             {"out", args.output},
                             {"target_spacing", args.target_spacing}});
    const Checkpoint ckpt = load_checkpoint(args.ckpt);
    if (ckpt.config.mode != NetMode::segmentation)
        throw UsageError("segment: checkpoint is not a segmentation model");
    const GynBTNet net = net_from_checkpoint(ckpt);
    VoxelGrid img = load_gbtv_image(args.input);
    const bool resample = img.spacing[0] != args.target_spacing ||
                          img.spacing[1] != args.target_spacing ||
                          img.spacing[2] != args.target_spacing;
    if (resample) img = resample_isotropic(img, args.target_spacing);
    const LabelMap pred = segment_volume(net, znormalize(img));
    save_gbtv(pred, args.output);
    std::cout << "wrote " << args.output << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::vector<std::string> pred;
    std::vector<std::string> gt;
    std::string out;
    std::string csv;
    std::string name = "model";
};

std::vector<std::pair<std::string, fs::path>> list_label_files(
    const fs::path& dir, const char* role) {
    const std::regex pattern("case_(\\d+)_.*\\.gbtv");
    std::vector<std::pair<std::string, fs::path>> out;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& path : files) {
        std::smatch match;
        const std::string name = path.filename().string();
        if (!std::regex_match(name, match, pattern)) continue;
        if (std::string(role) == "pred" && name.find("_img") != std::string::npos)
            continue;
        if (std::string(role) == "gt" && name.find("_lbl") == std::string::npos)
            continue;
        out.emplace_back("case_" + match[1].str(), path);
    }
    return out;
}

int run_evaluate(const EvaluateArgs& args) {
    echo_config("evaluate", 0,
                ordered_json{{"pred", args.pred},
                             {"gt", args.gt},
                             {"out", args.out},
                             {"csv", args.csv},
                             {"name", args.name}});
    std::vector<std::pair<std::string, fs::path>> preds, gts;
    if (args.pred.size() == 1 && fs::is_directory(args.pred[0]) &&
        args.gt.size() == 1 && fs::is_directory(args.gt[0])) {
        preds = list_label_files(args.pred[0], "pred");
        gts = list_label_files(args.gt[0], "gt");
    } else {
        if (args.pred.size() != args.gt.size())
            throw UsageError("evaluate: --pred and --gt counts differ");
        for (std::size_t i = 0; i < args.pred.size(); ++i) {
            preds.emplace_back("case_" + std::to_string(i), args.pred[i]);
            gts.emplace_back("case_" + std::to_string(i), args.gt[i]);
        }
    }
    if (preds.empty()) throw UsageError("evaluate: no prediction files");

    EvaluationReport report;
    report.model = args.name;
    for (const auto& [id, pred_path] : preds) {
        const auto gt_it =
            std::find_if(gts.begin(), gts.end(),
                         [&](const auto& g) { return g.first == id; });
        if (gt_it == gts.end())
            throw UsageError("evaluate: no ground truth for " + id);
        const LabelMap pred = load_gbtv_labels(pred_path);
        const LabelMap gt = load_gbtv_labels(gt_it->second);
        report.cases.push_back(evaluate_case(pred, gt, id));
    }
    if (!args.out.empty()) save_report(report, args.out);
    const auto rows = aggregate_reports(report.cases);
    const std::string csv = aggregate_csv(rows);
    if (!args.csv.empty()) {
        std::ofstream out(args.csv, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + args.csv);
        out << csv;
    }
    std::cout << csv;
    return 0;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

struct CompareArgs {
    std::vector<std::string> reports;
    std::string test = "anova";
    std::string out;
    std::string csv;
    std::string metric = "all";
    std::int64_t n_perm = 10000;
    std::uint64_t seed = 1;
    std::string alternative = "two_sided";
};

std::vector<double> metric_values(const EvaluationReport& report, int label,
                                  const std::string& metric,
                                  std::vector<std::string>* case_ids = nullptr) {
    std::vector<double> values;
    for (const auto& c : report.cases)
        for (const auto& s : c.structures) {
            if (s.label != label) continue;
            std::optional<double> v;
            if (metric == "dsc")
                v = s.dsc;
            else if (metric == "hd95_mm")
                v = s.hd95_mm;
            else
                v = s.asd_mm;
            if (v) {
                values.push_back(*v);
                if (case_ids) case_ids->push_back(c.case_id);
            }
        }
    return values;
}

int run_compare(const CompareArgs& args) {
    if (args.reports.size() < 2)
        throw UsageError("compare: need at least 2 reports");
    if (args.test == "permutation" && args.reports.size() != 2)
        throw UsageError("compare: the permutation test pairs exactly 2 reports");
    echo_config("compare", args.seed,
                ordered_json{{"reports", args.reports},
                             {"test", args.test},
                             {"metric", args.metric},
                             {"n_perm", args.n_perm},
                             {"alternative", args.alternative},
                             {"out", args.out},
                             {"csv", args.csv}});

    std::vector<EvaluationReport> reports;
    for (const auto& path : args.reports) reports.push_back(load_report(path));

    std::vector<int> labels;
    for (const auto& s : reports.front().cases.front().structures)
        labels.push_back(s.label);
    std::vector<std::string> metrics;
    if (args.metric == "all")
        metrics = {"dsc", "hd95_mm", "asd_mm"};
    else
        metrics = {args.metric};

    Alternative alternative = Alternative::two_sided;
    if (args.alternative == "greater")
        alternative = Alternative::greater;
    else if (args.alternative == "less")
        alternative = Alternative::less;
    else if (args.alternative != "two_sided")
        throw UsageError("compare: unknown alternative " + args.alternative);

    ordered_json rows = ordered_json::array();
    std::ostringstream csv;
    csv << "structure,metric,test,detail,statistic,p_value,stars\n";
    csv.precision(9);

    for (int label : labels) {
        const std::string name = phantom_label_name(label);
        for (const auto& metric : metrics) {
            if (args.test == "permutation") {
                std::vector<std::string> ids_a, ids_b;
                const auto va = metric_values(reports[0], label, metric, &ids_a);
                const auto vb = metric_values(reports[1], label, metric, &ids_b);
                // Pair by case id, dropping cases undefined on either side.
                std::vector<double> pa, pb;
                for (std::size_t i = 0; i < ids_a.size(); ++i) {
                    const auto it =
                        std::find(ids_b.begin(), ids_b.end(), ids_a[i]);
                    if (it == ids_b.end()) continue;
                    pa.push_back(va[i]);
                    pb.push_back(vb[static_cast<std::size_t>(it - ids_b.begin())]);
                }
                if (pa.empty()) continue;
                const StatTestResult r = paired_permutation_test(
                    pa, pb, args.n_perm, args.seed, alternative);
                const std::string detail = reports[0].model + " vs " +
                                           reports[1].model + " (n=" +
                                           std::to_string(pa.size()) + ")";
                rows.push_back(ordered_json{{"structure", name},
                                            {"metric", metric},
                                            {"test", r.test},
                                            {"detail", detail},
                                            {"statistic", r.statistic},
                                            {"p_value", r.p_value},
                                            {"stars", stars(r.p_value)},
                                            {"permutations", r.permutations},
                                            {"exhaustive", r.exhaustive},
                                            {"seed", r.seed}});
                csv << name << "," << metric << "," << r.test << "," << detail
                    << "," << r.statistic << "," << r.p_value << ","
                    << stars(r.p_value) << "\n";
            } else {
                std::vector<SampleGroup> groups;
                for (const auto& report : reports) {
                    SampleGroup g;
                    g.name = report.model;
                    g.values = metric_values(report, label, metric);
                    if (g.values.size() >= 2) groups.push_back(std::move(g));
                }
                if (groups.size() < 2) continue;
                if (args.test == "anova") {
                    const StatTestResult r = one_way_anova(groups);
                    rows.push_back(ordered_json{{"structure", name},
                                                {"metric", metric},
                                                {"test", r.test},
                                                {"detail", "omnibus"},
                                                {"statistic", r.statistic},
                                                {"df1", r.df1},
                                                {"df2", r.df2},
                                                {"p_value", r.p_value},
                                                {"stars", stars(r.p_value)},
                                                {"exact_separation",
                                                 r.exact_separation}});
                    csv << name << "," << metric << ",anova,omnibus,"
                        << r.statistic << "," << r.p_value << ","
                        << stars(r.p_value) << "\n";
                } else if (args.test == "tukey") {
                    const StatTestResult r = tukey_hsd(groups);
                    for (const auto& pair : r.pairs) {
                        const std::string detail = pair.a + " vs " + pair.b;
                        rows.push_back(ordered_json{{"structure", name},
                                                    {"metric", metric},
                                                    {"test", r.test},
                                                    {"detail", detail},
                                                    {"statistic", pair.statistic},
                                                    {"p_value", pair.p_value},
                                                    {"stars", stars(pair.p_value)}});
                        csv << name << "," << metric << ",tukey_hsd," << detail
                            << "," << pair.statistic << "," << pair.p_value
                            << "," << stars(pair.p_value) << "\n";
                    }
                } else {
                    throw UsageError("compare: unknown test " + args.test);
                }
            }
        }
    }

    ordered_json out{{"test", args.test}, {"rows", rows}};
    if (!args.out.empty()) {
        std::ofstream f(args.out, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + args.out);
        f << out.dump(2) << "\n";
    }
    if (!args.csv.empty()) {
        std::ofstream f(args.csv, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + args.csv);
        f << csv.str();
    }
    std::cout << csv.str();
    return 0;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

int run_gradcheck(std::uint64_t seed, double tol) {
    echo_config("gradcheck", seed, ordered_json{{"tol", tol}});
    bool all_pass = true;
    for (const auto& report : run_standard_gradcheck(seed, tol)) {
        std::cout << (report.pass ? "[PASS] " : "[FAIL] ") << report.name
                  << ": max rel err " << report.max_rel_err << " over "
                  << report.coords_checked << " coords\n";
        all_pass = all_pass && report.pass;
    }
    return all_pass ? 0 : 3;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

int run_bench(std::vector<double> ratios, int dim, std::uint64_t seed) {
    if (ratios.empty()) ratios = {0.4, 0.6, 0.8};
    echo_config("bench", seed,
                ordered_json{{"mask_ratios", ratios}, {"dims", dim}});

    NetworkConfig config = toy_config();
    config.mode = NetMode::reconstruction;
    config.norm_kind = NormKind::sparse_batch;
    const GynBTNet net = build(config, seed);

    Rng rng(mix_seed(seed, "bench-input"));
    Tensor5 x(1, 1, dim, dim, dim);
    for (auto& v : x.data) v = rng.normal();

    const std::int64_t dense_macs =
        encoder_dense_macs(config, {dim, dim, dim});
    std::cout << "mask_ratio,active_fraction,sparse_macs,dense_macs,mac_ratio,"
                 "sparse_ms,dense_ms\n";
    for (double ratio : ratios) {
        MaskSpec spec{{8, 8, 8}, ratio, mix_seed(seed, "bench-mask")};
        const OccupancyMask mask = generate_patch_mask({dim, dim, dim}, spec);
        const MaskPyramid pyramid = build_pyramid(mask, config.num_stages);

        std::uint64_t macs = 0;
        const auto t0 = std::chrono::steady_clock::now();
        encoder_forward_sparse(net, x, &pyramid, &macs);
        const auto t1 = std::chrono::steady_clock::now();
        encoder_forward_sparse(net, x, nullptr, nullptr);
        const auto t2 = std::chrono::steady_clock::now();

        const double mac_ratio = static_cast<double>(macs) /
                                 static_cast<double>(dense_macs);
        const auto ms = [](auto a, auto b) {
            return std::chrono::duration<double, std::milli>(b - a).count();
        };
        std::cout << ratio << "," << mask.active_fraction() << "," << macs
                  << "," << dense_macs << "," << mac_ratio << ","
                  << ms(t0, t1) << "," << ms(t1, t2) << "\n";
    }
    return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"volumetric multi-stage segmentation engine"};
    app.require_subcommand(1);

    PhantomArgs phantom_args;
    auto* phantom = app.add_subcommand("phantom", "generate a synthetic cohort");
    phantom->add_option("--out", phantom_args.out_dir, "output directory")
        ->required();
    phantom->add_option("--cases", phantom_args.cases, "number of cases");
    phantom->add_option("--seed", phantom_args.seed, "cohort seed");
    phantom->add_option("--dim", phantom_args.dim, "cubic volume dimension");
    phantom->add_option("--spacing", phantom_args.spacing, "voxel spacing mm");
    phantom->add_option("--noise-sd", phantom_args.noise_sd, "noise sd");

    TrainArgs pretrain_args;
    auto* pretrain = app.add_subcommand("pretrain", "masked-reconstruction stage");
    TrainArgs finetune_args;
    auto* finetune = app.add_subcommand("finetune", "supervised fine-tuning");
    finetune->add_option("--stage", finetune_args.stage,
                         "supervised | task (default task)");
    finetune->add_option("--init", finetune_args.init,
                         "checkpoint path or 'none'");
    for (auto [sub, a] : {std::pair{pretrain, &pretrain_args},
                          std::pair{finetune, &finetune_args}}) {
        sub->add_option("--config", a->config_path, "JSON config file");
        sub->add_option("--cohort", a->cohort, "cohort.json path");
        sub->add_option("--out", a->out, "output checkpoint");
        sub->add_option("--log", a->log, "JSONL training log");
        sub->add_option("--seed", a->seed, "training seed");
        sub->add_option("--epochs", a->epochs, "epochs");
        sub->add_option("--steps", a->steps, "steps per epoch");
        sub->add_option("--batch", a->batch, "batch size");
        sub->add_option("--lr-max", a->lr_max, "peak learning rate");
        sub->add_flag("--deterministic", a->deterministic,
                      "single worker, zeroed wall times");
        sub->add_option("--threads", a->threads, "worker threads");
    }

    SegmentArgs segment_args;
    auto* segment = app.add_subcommand("segment", "segment one volume");
    segment->add_option("--ckpt", segment_args.ckpt, "checkpoint")->required();
    segment->add_option("--in", segment_args.input, "input .gbtv image")
        ->required();
    segment->add_option("--out", segment_args.output, "output .gbtv labels")
        ->required();
    segment->add_option("--target-spacing", segment_args.target_spacing,
                        "resample spacing mm");

    EvaluateArgs evaluate_args;
    auto* evaluate = app.add_subcommand("evaluate", "segmentation metrics");
    evaluate->add_option("--pred", evaluate_args.pred, "predictions (files or dir)")
        ->required();
    evaluate->add_option("--gt", evaluate_args.gt, "ground truth (files or dir)")
        ->required();
    evaluate->add_option("--out", evaluate_args.out, "per-case JSON report");
    evaluate->add_option("--csv", evaluate_args.csv, "aggregate CSV path");
    evaluate->add_option("--name", evaluate_args.name, "model name");

    CompareArgs compare_args;
    auto* compare = app.add_subcommand("compare", "statistical comparison");
    compare->add_option("--reports", compare_args.reports, "evaluate JSON reports")
        ->required();
    compare->add_option("--test", compare_args.test,
                        "anova | tukey | permutation");
    compare->add_option("--metric", compare_args.metric,
                        "dsc | hd95_mm | asd_mm | all");
    compare->add_option("--out", compare_args.out, "JSON output");
    compare->add_option("--csv", compare_args.csv, "CSV output");
    compare->add_option("--n-perm", compare_args.n_perm, "sampled permutations");
    compare->add_option("--seed", compare_args.seed, "permutation seed");
    compare->add_option("--alternative", compare_args.alternative,
                        "two_sided | greater | less");

    std::uint64_t gradcheck_seed = 1;
    double gradcheck_tol = 1e-4;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks");
    gradcheck->add_option("--seed", gradcheck_seed, "sampling seed");
    gradcheck->add_option("--tol", gradcheck_tol, "max relative error");

    std::vector<double> bench_ratios;
    int bench_dim = 32;
    std::uint64_t bench_seed = 1;
    auto* bench = app.add_subcommand("bench", "sparse vs dense encoder cost");
    bench->add_option("--mask-ratio", bench_ratios, "patch mask ratios");
    bench->add_option("--dim", bench_dim, "cubic input dimension");
    bench->add_option("--seed", bench_seed, "mask/input seed");

    std::vector<const char*> argv;
    argv.push_back("gbt");
    for (const auto& a : args) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (phantom->parsed()) return run_phantom(phantom_args);
        if (pretrain->parsed()) return run_train("pretrain", pretrain_args);
        if (finetune->parsed()) return run_train("finetune", finetune_args);
        if (segment->parsed()) return run_segment(segment_args);
        if (evaluate->parsed()) return run_evaluate(evaluate_args);
        if (compare->parsed()) return run_compare(compare_args);
        if (gradcheck->parsed()) return run_gradcheck(gradcheck_seed, gradcheck_tol);
        if (bench->parsed()) return run_bench(bench_ratios, bench_dim, bench_seed);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const CodecError& e) {
        if (e.kind == CodecErrorKind::io_failure) {
            std::cerr << "usage error: " << e.what() << "\n";
            return 1;
        }
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const CheckpointError& e) {
        if (e.kind == CheckpointErrorKind::io_failure) {
            std::cerr << "usage error: " << e.what() << "\n";
            return 1;
        }
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace gbt
