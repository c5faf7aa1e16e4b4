#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fodshift/harness.hpp"
#include "fodshift/io.hpp"

using namespace fodshift;
using json = nlohmann::json;

namespace {

struct TrainFlags {
    std::string config;
    int epochs = 0;
    double lr = 0.0;
    int batch_size = 0;
    std::uint64_t seed = 0;
    bool paper_hparams = false;

    void add_to(CLI::App* app) {
        app->add_option("--config", config, "JSON file with training settings");
        app->add_option("--epochs", epochs, "Override the epoch count");
        app->add_option("--lr", lr, "Override the learning rate");
        app->add_option("--batch-size", batch_size, "Override the batch size");
        app->add_option("--seed", seed, "Override the shuffling seed");
        app->add_flag("--paper-hparams", paper_hparams, "Use the full 1000-epoch schedule");
    }

    // Returns the config; `model` receives "hidden"/"dropout" when the file has them.
    TrainConfig resolve(TrainConfig base, json* model = nullptr) const {
        if (paper_hparams) base.epochs = TrainConfig::paper_defaults().epochs;
        if (!config.empty()) {
            json j = read_json(config);
            if (!j.is_object()) throw InvalidArgument(config + ": expected a JSON object");
            for (const char* k : {"hidden", "dropout", "lmax"})
                if (j.contains(k)) {
                    if (!model) throw InvalidArgument(config + ": '" + k + "' is only accepted by train");
                    (*model)[k] = j[k];
                    j.erase(k);
                }
            base = train_config_from_json(j, base);
        }
        if (epochs > 0) base.epochs = epochs;
        if (lr > 0.0) base.lr = lr;
        if (batch_size > 0) base.batch_size = batch_size;
        if (seed > 0) base.seed = seed;
        base.validate();
        return base;
    }
};

std::vector<const Subject*> pointers(const std::vector<Subject>& subjects, std::size_t begin, std::size_t end) {
    std::vector<const Subject*> out;
    for (std::size_t i = begin; i < end; ++i) out.push_back(&subjects[i]);
    return out;
}

std::vector<int> six_of(const Subject& s) {
    return six_direction_indices(s.gradients, preset_by_name(s.site_label).protocol.six_direction_b);
}

void print_report(const MetricsReport& m) {
    std::printf("class  AR      AE     n_voxels\n");
    for (const auto& c : m.classes) std::printf("%d-F    %6.2f  %6.2f  %d\n", c.fiber_class, c.ar, c.ae, c.n_voxels);
    std::printf("dAFD   %.4f\n", m.delta_afd);
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Synthetic domain-shift study for FOD estimation from six diffusion directions"};
    app.require_subcommand(1);

    // ---- cohort build ----
    auto* cohort = app.add_subcommand("cohort", "Phantom cohorts");
    cohort->require_subcommand(1);
    auto* cohort_build = cohort->add_subcommand("build", "Simulate a cohort and write it to a directory");
    std::string site = "dhcp", group = "baseline", label, out;
    int n_subjects = 20, grid = 12;
    std::uint64_t seed = 1;
    std::vector<double> ages;
    cohort_build->add_option("--site", site, "Site preset: dhcp or bcp")->capture_default_str();
    cohort_build->add_option("--group", group, "Age window: baseline, young or old")->capture_default_str();
    cohort_build->add_option("--ages", ages, "Explicit age window lo hi (overrides --group)")->expected(2);
    cohort_build->add_option("--n", n_subjects, "Number of subjects")->capture_default_str();
    cohort_build->add_option("--grid", grid, "Grid edge length in voxels")->capture_default_str();
    cohort_build->add_option("--seed", seed, "Cohort seed")->capture_default_str();
    cohort_build->add_option("--label", label, "Subject id prefix (default: site)");
    cohort_build->add_option("--out", out, "Output directory")->required();

    // ---- experiment run / report ----
    auto* experiment = app.add_subcommand("experiment", "Study experiments");
    experiment->require_subcommand(1);
    auto* exp_run = experiment->add_subcommand("run", "Run an experiment spec");
    std::string spec_path, in_dir, format = "md";
    bool paper_scale = false, paper_hparams = false, quiet = false;
    exp_run->add_option("--spec", spec_path, "Experiment spec (JSON)")->required()->check(CLI::ExistingFile);
    exp_run->add_option("--out", out, "Output directory (default: the spec's output_dir)");
    exp_run->add_flag("--paper-scale", paper_scale, "100 subjects per cohort");
    exp_run->add_flag("--paper-hparams", paper_hparams, "1000 training epochs");
    exp_run->add_flag("--quiet", quiet, "No progress messages");
    auto* exp_report = experiment->add_subcommand("report", "Render the runs found in a directory");
    exp_report->add_option("--in", in_dir, "Run directory or a directory of run directories")->required();
    exp_report->add_option("--format", format, "md or csv")->check(CLI::IsMember({"md", "csv"}))->capture_default_str();

    // ---- harmonize mom ----
    auto* harmonize = app.add_subcommand("harmonize", "Harmonization");
    harmonize->require_subcommand(1);
    auto* mom = harmonize->add_subcommand("mom", "Method-of-moments mapping of a target cohort onto a source cohort");
    std::string source_ref, target;
    int n_ref = 1;
    double sigma = MomOptions{}.sigma_vox;
    mom->add_option("--source-ref", source_ref, "Source reference cohort directory")->required();
    mom->add_option("--target", target, "Target cohort directory")->required();
    mom->add_option("--n-ref-subjects", n_ref, "Leading target subjects used as reference")
        ->check(CLI::IsMember({1, 2, 5, 10}))
        ->capture_default_str();
    mom->add_option("--sigma", sigma, "Gaussian smoothing of moment maps (voxels)")->capture_default_str();
    mom->add_option("--out", out, "Output cohort directory")->required();

    // ---- train / finetune / predict ----
    auto* train_cmd = app.add_subcommand("train", "Train an estimator on a cohort");
    std::string cohort_dir, model_path;
    int n_val = -1;
    TrainFlags train_flags;
    train_cmd->add_option("--cohort", cohort_dir, "Cohort directory")->required();
    train_cmd->add_option("--n-val", n_val, "Trailing subjects held out for model selection (default 15%, at least 1)");
    train_cmd->add_option("--out", out, "Model file")->required();
    train_flags.add_to(train_cmd);

    auto* finetune_cmd = app.add_subcommand("finetune", "Fine-tune a model on target subjects");
    TrainFlags ft_flags;
    finetune_cmd->add_option("--model", model_path, "Input model file")->required()->check(CLI::ExistingFile);
    finetune_cmd->add_option("--cohort", cohort_dir, "Target cohort directory")->required();
    finetune_cmd->add_option("--n-subjects", n_subjects, "Leading target subjects to fine-tune on")->capture_default_str();
    finetune_cmd->add_option("--out", out, "Output model file")->required();
    ft_flags.add_to(finetune_cmd);

    auto* predict_cmd = app.add_subcommand("predict", "Predict FODs for a subject");
    std::string subject_dir;
    bool evaluate = false;
    predict_cmd->add_option("--model", model_path, "Model file")->required()->check(CLI::ExistingFile);
    predict_cmd->add_option("--subject", subject_dir, "Subject directory")->required();
    predict_cmd->add_option("--out", out, "Output FOD volume");
    predict_cmd->add_flag("--evaluate", evaluate, "Print AR/AE/dAFD against the subject's ground truth");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cohort_build->parsed()) {
            CohortConfig cfg;
            cfg.preset = preset_by_name(site);
            cfg.label = label.empty() ? site : label;
            cfg.n_subjects = n_subjects;
            cfg.grid = Dims{grid, grid, grid};
            cfg.seed = seed;
            std::pair<double, double> window;
            if (!ages.empty()) window = {ages[0], ages[1]};
            else if (group == "baseline") window = cfg.preset.baseline_ages;
            else if (group == "young") window = cfg.preset.young_ages;
            else if (group == "old") window = cfg.preset.old_ages;
            else throw InvalidArgument("unknown age group '" + group + "'");
            cfg.age_lo = window.first;
            cfg.age_hi = window.second;
            write_cohort(out, build_cohort(cfg));
            std::printf("wrote %d subjects to %s\n", n_subjects, out.c_str());
        } else if (exp_run->parsed()) {
            ExperimentSpec spec = read_spec(spec_path);
            if (paper_scale) spec.n_subjects = 100;
            if (paper_hparams) spec.train.epochs = TrainConfig::paper_defaults().epochs;
            const std::string dir = out.empty() ? spec.output_dir : out;
            if (dir.empty()) throw InvalidArgument("no output directory: pass --out or set output_dir in the spec");
            spec.validate();
            const RunRecord rec = run_experiment(spec, quiet ? Logger{} : Logger{log_line});
            const auto leaked = leakage_audit(rec);
            if (!leaked.empty()) throw Error("leakage audit failed: test subject " + leaked.front() + " used for training");
            write_run(dir, rec);
            write_spec(fs::path(dir) / "spec.json", spec);
            const RunRecord one[] = {rec};
            std::cout << render_markdown(one);
        } else if (exp_report->parsed()) {
            const auto runs = read_runs(in_dir);
            if (runs.empty()) throw InvalidArgument("no record.json under " + in_dir);
            std::cout << (format == "csv" ? render_csv(runs) : render_markdown(runs));
        } else if (mom->parsed()) {
            const auto src = read_cohort(source_ref);
            const auto tgt = read_cohort(target);
            if (src.empty() || static_cast<int>(tgt.size()) < n_ref) throw InvalidArgument("not enough subjects");
            MomOptions opt;
            opt.sigma_vox = sigma;
            const auto src_six = six_of(src.front());
            const auto tgt_six = six_of(tgt.front());
            const auto mapping = fit_mom(pointers(src, 0, src.size()), src_six, pointers(tgt, 0, static_cast<std::size_t>(n_ref)), tgt_six, opt);
            std::vector<Subject> mapped;
            for (const auto& s : tgt) mapped.push_back(harmonize_subject(s, tgt_six, mapping, opt.floor_at_zero));
            write_cohort(out, mapped);
            write_mapping(fs::path(out) / "mapping.raw", mapping, tgt.front().voxel_size_mm);
            std::printf("harmonized %zu subjects into %s\n", mapped.size(), out.c_str());
        } else if (train_cmd->parsed()) {
            const auto subs = read_cohort(cohort_dir);
            const int n = static_cast<int>(subs.size());
            if (n_val < 0) n_val = std::max(1, split_sizes(n, SplitFractions{}).val);
            if (n_val < 1 || n_val >= n) throw InvalidArgument("need at least one training and one validation subject");
            json model_keys = json::object();
            const TrainConfig cfg = train_flags.resolve(TrainConfig::training_defaults(), &model_keys);
            const auto hidden = model_keys.value("hidden", std::vector<int>{256, 256});
            const double dropout = model_keys.value("dropout", 0.1);
            const int lmax = model_keys.value("lmax", subs.front().lmax);
            const auto six = six_of(subs.front());
            const auto tr = pointers(subs, 0, static_cast<std::size_t>(n - n_val));
            const auto va = pointers(subs, static_cast<std::size_t>(n - n_val), subs.size());
            const auto res = train(make_estimator(cfg.seed, hidden, dropout, lmax), make_dataset(tr, six), make_dataset(va, six), cfg);
            write_model(out, res.model);
            std::printf("best epoch %d of %d, validation MSE %.6g (initial %.6g)\n", res.history.best_epoch, cfg.epochs,
                        res.history.best_val_loss, res.history.initial_val_loss);
        } else if (finetune_cmd->parsed()) {
            const auto model = read_model(model_path);
            const auto subs = read_cohort(cohort_dir);
            if (n_subjects < 1 || n_subjects > static_cast<int>(subs.size())) throw InvalidArgument("--n-subjects out of range");
            const TrainConfig cfg = ft_flags.resolve(TrainConfig::finetune_defaults());
            const auto res = fine_tune(model, make_dataset(pointers(subs, 0, static_cast<std::size_t>(n_subjects)), six_of(subs.front())), cfg);
            write_model(out, res.model);
            std::printf("best epoch %d of %d, held-out MSE %.6g (before %.6g)\n", res.history.best_epoch, cfg.epochs,
                        res.history.best_val_loss, res.history.initial_val_loss);
        } else if (predict_cmd->parsed()) {
            const auto model = read_model(model_path);
            const Subject s = read_subject(subject_dir);
            const auto fod = predict_volume(model, s, six_of(s));
            if (!out.empty()) write_volume(out, fod, s.voxel_size_mm);
            if (evaluate) print_report(evaluate_fods(fod, s.gt_fod, s.wm_mask));
            if (out.empty() && !evaluate) throw InvalidArgument("nothing to do: pass --out and/or --evaluate");
        }
    } catch (const std::exception& e) {
        std::cerr << "fodshift: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
