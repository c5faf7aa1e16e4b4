#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fodshift/estimator.hpp"
#include "fodshift/harmonize.hpp"
#include "fodshift/io.hpp"
#include "fodshift/metrics.hpp"
#include "fodshift/phantom.hpp"

namespace fodshift {

enum class ExperimentKind { IntraBaseline, AgeSplit, InterSite };
enum class Method { ControlCross, ControlSelf, Mom, Finetune, ScratchAblation };

std::string to_string(ExperimentKind k);
std::string to_string(Method m);
ExperimentKind experiment_kind_from_string(std::string_view s);
Method method_from_string(std::string_view s);

struct SplitFractions {
    double train = 0.70;
    double val = 0.15;
    double test = 0.15;
};

struct SplitSizes {
    int train = 0, val = 0, test = 0;
};

/// floor(n val) and floor(n test) subjects, the rest for training.
SplitSizes split_sizes(int n, const SplitFractions& f);

struct ExperimentSpec {
    ExperimentKind kind = ExperimentKind::IntraBaseline;
    std::string source_site = "dhcp";  // the only site for intra_baseline and age_split
    std::string target_site = "dhcp";  // inter_site only
    int n_subjects = 20;               // per cohort
    Dims grid{12, 12, 12};
    SplitFractions split;
    std::vector<int> n_target_subjects{1, 2, 5, 10};
    std::vector<Method> methods{Method::ControlCross, Method::ControlSelf, Method::Mom, Method::Finetune,
                                Method::ScratchAblation};
    int age_finetune_subjects = 5;
    int scratch_subjects = 10;
    bool gold_standard = true;  // intra_baseline: split-half CSD consistency
    std::optional<std::pair<double, double>> young_ages;  // default: the preset's windows
    std::optional<std::pair<double, double>> old_ages;
    std::uint64_t seed = 1;
    TrainConfig train = TrainConfig::training_defaults();
    TrainConfig finetune = TrainConfig::finetune_defaults();
    std::vector<int> hidden{256, 256};
    double dropout = 0.1;
    int lmax = 8;
    MomOptions mom;
    EvalOptions eval;
    std::string output_dir;  // not part of the hash

    void validate() const;
    bool has_method(Method m) const;
};

nlohmann::json spec_to_json(const ExperimentSpec& spec);
/// Missing keys take their defaults; unknown keys are rejected.
ExperimentSpec spec_from_json(const nlohmann::json& j);
void write_spec(const fs::path& path, const ExperimentSpec& spec);
ExperimentSpec read_spec(const fs::path& path);

/// 16 hex digits of a hash of the canonical spec JSON without output_dir.
std::string spec_hash(const ExperimentSpec& spec);

/// Subjects a result depends on, by role.
struct DataUse {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> reference;  // MoM reference groups
    std::vector<std::string> test;
};

struct MethodResult {
    std::string site;        // site of the test data
    std::string experiment;  // kind, with the test age group for age_split
    std::string method;
    int n_target_subjects = 0;
    MetricsReport metrics;
    DataUse data;
};

struct GrowthFit {
    std::string site;
    ArctanFit fit;
    double age_mid = 0.0;          // preset age unit
    double slope_per_month = 0.0;  // at age_mid
    int n_subjects = 0;
};

struct RunRecord {
    std::string kind;
    std::string spec_hash;
    nlohmann::json spec;
    std::vector<MethodResult> results;
    std::vector<GrowthFit> growth;
    std::map<std::string, double> timing_s;  // not part of record.json

    const MethodResult& find(std::string_view experiment, std::string_view method, int n_target = -1) const;
};

/// Test-subject ids that also appear in a training, validation or reference
/// set of any result in the record; empty when there is no leakage.
std::vector<std::string> leakage_audit(const RunRecord& record);

using Logger = std::function<void(const std::string&)>;

RunRecord run_intra_baseline(const ExperimentSpec& spec, const Logger& log = {});
RunRecord run_age_split(const ExperimentSpec& spec, const Logger& log = {});
RunRecord run_inter_site(const ExperimentSpec& spec, const Logger& log = {});
/// Dispatches on spec.kind.
RunRecord run_experiment(const ExperimentSpec& spec, const Logger& log = {});

nlohmann::json record_to_json(const RunRecord& record);
RunRecord record_from_json(const nlohmann::json& j);

inline constexpr const char* kCsvHeader = "site,experiment,method,n_target_subjects,class,AR,AE,dAFD,n_voxels";

/// One row per result and fiber class; numbers with 2 decimals.
std::string render_csv(std::span<const RunRecord> records);
/// Per record: a table with 1-F, 2-F, 3-F AR/AE and dAFD columns, then growth fits.
std::string render_markdown(std::span<const RunRecord> records);

/// record.json, metrics.csv, report.md and timing.json in `dir`. All but
/// timing.json depend only on the spec.
void write_run(const fs::path& dir, const RunRecord& record);
/// record.json of `dir` itself and of its immediate subdirectories, by path order.
std::vector<RunRecord> read_runs(const fs::path& dir);

}  // namespace fodshift
