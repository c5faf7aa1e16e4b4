#include <cmath>
#include <filesystem>
#include <unistd.h>

#include "doctest.h"
#include "fodshift/harness.hpp"

using namespace fodshift;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int n = 0;
        path = fs::temp_directory_path() / ("fodshift_harness_" + std::to_string(::getpid()) + "_" + std::to_string(++n));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// Small enough to run in seconds: 7 subjects split 5/1/1 on a 6^3 grid.
ExperimentSpec tiny(ExperimentKind kind) {
    ExperimentSpec s;
    s.kind = kind;
    s.n_subjects = 7;
    s.grid = Dims{6, 6, 6};
    s.hidden = {16};
    s.train.epochs = 3;
    s.train.lr = 1e-3;
    s.finetune.epochs = 2;
    s.finetune.lr = 1e-4;
    s.n_target_subjects = {1, 2};
    s.age_finetune_subjects = 2;
    s.scratch_subjects = 3;
    s.seed = 5;
    return s;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("split sizes floor val and test") {
    const SplitFractions f;
    auto s = split_sizes(20, f);
    CHECK(s.train == 14);
    CHECK(s.val == 3);
    CHECK(s.test == 3);
    s = split_sizes(100, f);
    CHECK(s.train == 70);
    CHECK(s.val == 15);
    CHECK(s.test == 15);
    s = split_sizes(7, f);
    CHECK(s.train == 5);
    CHECK(s.val == 1);
    CHECK(s.test == 1);
    s = split_sizes(60, SplitFractions{4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0});
    CHECK(s.train == 40);
    CHECK(s.val == 10);
    CHECK(s.test == 10);
}

TEST_CASE("spec validation") {
    ExperimentSpec s;
    CHECK_NOTHROW(s.validate());
    CHECK(s.n_target_subjects == std::vector<int>{1, 2, 5, 10});

    auto bad = s;
    bad.split = SplitFractions{0.7, 0.2, 0.2};
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = s;
    bad.n_subjects = 5;  // 0 val subjects
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = s;
    bad.source_site = "mars";
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = s;
    bad.kind = ExperimentKind::InterSite;
    bad.n_target_subjects = {1, 20};
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = s;
    bad.kind = ExperimentKind::InterSite;
    bad.methods.clear();
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = s;
    bad.young_ages = std::make_pair(5.0, 1.0);
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = s;
    bad.train.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("spec JSON round trip and hash") {
    TempDir tmp;
    ExperimentSpec s = tiny(ExperimentKind::InterSite);
    s.source_site = "bcp";
    s.methods = {Method::Finetune, Method::ControlCross};
    s.old_ages = std::make_pair(20.0, 30.0);
    s.train.lr = 1.0 / 7.0;
    s.seed = 0xDEADBEEFCAFEull;
    write_spec(tmp.path / "spec.json", s);
    const auto r = read_spec(tmp.path / "spec.json");
    CHECK(spec_to_json(r) == spec_to_json(s));
    CHECK(spec_hash(r) == spec_hash(s));
    CHECK(spec_hash(s).size() == 16);

    write_spec(tmp.path / "again.json", r);
    CHECK(read_file(tmp.path / "spec.json") == read_file(tmp.path / "again.json"));

    auto other = s;
    other.output_dir = "/somewhere/else";
    CHECK(spec_hash(other) == spec_hash(s));
    other.seed += 1;
    CHECK(spec_hash(other) != spec_hash(s));

    // partial specs take defaults
    const auto p = spec_from_json(nlohmann::json{{"kind", "age_split"}, {"source_site", "bcp"}});
    CHECK(p.kind == ExperimentKind::AgeSplit);
    CHECK(p.n_subjects == 20);
    CHECK(p.train.epochs == 200);
    CHECK(p.finetune.lr == TrainConfig::finetune_defaults().lr);

    CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"kind", "age_split"}, {"sead", 1}}), InvalidArgument);
    CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"kind", "nope"}}), InvalidArgument);
    CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"methods", {"mom", "magic"}}}), InvalidArgument);
    CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"mom", {{"sigma", 2}}}}), InvalidArgument);
    CHECK_THROWS_AS(spec_from_json(nlohmann::json{{"n_subjects", "many"}}), InvalidArgument);
    CHECK_THROWS_AS(spec_from_json(nlohmann::json::array()), InvalidArgument);
}

TEST_CASE("rendering") {
    SUBCASE("empty record list gives the header only") {
        CHECK(render_csv({}) == std::string(kCsvHeader) + "\n");
    }
    SUBCASE("rows per result and class, 2 decimals, fixed column order") {
        RunRecord rec;
        rec.kind = "inter_site";
        rec.spec_hash = "0123456789abcdef";
        for (int n : {1, 2}) {
            for (const char* m : {"mom", "finetune"}) {
                MethodResult r;
                r.site = "dhcp";
                r.experiment = "inter_site";
                r.method = m;
                r.n_target_subjects = n;
                r.metrics.delta_afd = 0.016;
                for (int k = 1; k <= 3; ++k)
                    r.metrics.classes.push_back(ClassMetrics{k, 87.0349, 9.126 + k, 100 * k, 90 * k});
                rec.results.push_back(r);
            }
        }
        const RunRecord recs[] = {rec};
        const std::string csv = render_csv(recs);
        CHECK(count_lines(csv) == 1 + 2 * 2 * 3);
        CHECK(csv.find("dhcp,inter_site,mom,1,1,87.03,10.13,0.02,100\n") != std::string::npos);
        CHECK(csv.find("dhcp,inter_site,finetune,2,3,87.03,12.13,0.02,300\n") != std::string::npos);

        const std::string md = render_markdown(recs);
        const auto head = md.find("| site | experiment | method | n | 1-F AR | 1-F AE | 2-F AR | 2-F AE | 3-F AR | 3-F AE | dAFD |");
        CHECK(head != std::string::npos);
        CHECK(md.find("| dhcp | inter_site | mom | 1 | 87.03 | 10.13 | 87.03 | 11.13 | 87.03 | 12.13 | 0.02 |") != std::string::npos);

        // NaN metrics render and round-trip through JSON
        rec.results[0].metrics.classes[2].ar = std::nan("");
        const auto back = record_from_json(nlohmann::json::parse(record_to_json(rec).dump()));
        CHECK(std::isnan(back.results[0].metrics.classes[2].ar));
        CHECK(dump_json(record_to_json(back)) == dump_json(record_to_json(rec)));
        const RunRecord with_nan[] = {rec};
        CHECK(render_csv(with_nan).find(",nan,") != std::string::npos);
    }
}

TEST_CASE("leakage audit") {
    RunRecord rec;
    MethodResult a;
    a.data = DataUse{{"s-000", "s-001"}, {"s-002"}, {}, {"s-003"}};
    rec.results.push_back(a);
    CHECK(leakage_audit(rec).empty());
    MethodResult b;
    b.data = DataUse{{"s-000"}, {}, {"s-003"}, {"s-004"}};
    rec.results.push_back(b);
    CHECK(leakage_audit(rec) == std::vector<std::string>{"s-003"});
}

TEST_CASE("intra-site baseline runs end to end and is deterministic") {
    TempDir tmp;
    auto spec = tiny(ExperimentKind::IntraBaseline);
    const auto a = run_intra_baseline(spec);
    REQUIRE(a.results.size() == 2);
    CHECK(a.results[0].method == "dl");
    CHECK(a.results[1].method == "gs");
    CHECK(a.results[0].data.train.size() == 5);
    CHECK(a.results[0].data.val.size() == 1);
    CHECK(a.results[0].data.test.size() == 1);
    CHECK(leakage_audit(a).empty());
    CHECK(a.timing_s.count("train") == 1);

    const auto b = run_experiment(spec);
    write_run(tmp.path / "a", a);
    write_run(tmp.path / "b", b);
    for (const char* f : {"record.json", "metrics.csv", "report.md"})
        CHECK(read_file(tmp.path / "a" / f) == read_file(tmp.path / "b" / f));

    const auto runs = read_runs(tmp.path);
    REQUIRE(runs.size() == 2);
    CHECK(render_csv(runs) == render_csv(std::vector<RunRecord>{a, b}));
    CHECK(runs[0].spec_hash == spec_hash(spec));

    spec.seed += 1;
    const auto c = run_intra_baseline(spec);
    const RunRecord ra[] = {a}, rc[] = {c};
    CHECK(render_csv(ra) != render_csv(rc));
}

TEST_CASE("age split produces the 2x2 matrix, fine-tuned rows and a growth fit") {
    const auto spec = tiny(ExperimentKind::AgeSplit);
    const auto r = run_age_split(spec);
    CHECK(r.results.size() == 6);
    for (const char* group : {"age_split/young", "age_split/old"})
        for (const char* m : {"self", "cross", "cross_ft"}) CHECK_NOTHROW(r.find(group, m));
    CHECK(r.find("age_split/young", "cross_ft").n_target_subjects == 2);
    CHECK(r.find("age_split/young", "cross_ft").data.train.size() == 5 + 2);
    CHECK(r.find("age_split/young", "self").data.train.front().rfind("dhcp-young-", 0) == 0);
    CHECK(r.find("age_split/young", "cross").data.train.front().rfind("dhcp-old-", 0) == 0);
    CHECK(leakage_audit(r).empty());
    REQUIRE(r.growth.size() == 1);
    CHECK(r.growth[0].n_subjects == 14);
    CHECK(std::isfinite(r.growth[0].slope_per_month));
    CHECK(r.growth[0].age_mid == doctest::Approx(0.5 * (26.7 + 44.4)));
}

TEST_CASE("inter-site sweep covers every method and n") {
    auto spec = tiny(ExperimentKind::InterSite);
    spec.source_site = "bcp";
    spec.target_site = "dhcp";
    const auto r = run_inter_site(spec);
    // control_cross, control_self, 2 x (mom, finetune), scratch_ablation
    CHECK(r.results.size() == 7);
    for (int n : {1, 2}) {
        const auto& mom = r.find("inter_site", "mom", n);
        CHECK(mom.data.reference.size() == 5 + static_cast<std::size_t>(n));
        const auto& ft = r.find("inter_site", "finetune", n);
        CHECK(ft.data.train.size() == 5 + static_cast<std::size_t>(n));
    }
    CHECK(r.find("inter_site", "scratch_ablation").data.train.size() == 3);
    CHECK(r.find("inter_site", "control_self").n_target_subjects == 5);
    for (const auto& res : r.results) {
        CHECK(res.site == "dhcp");
        CHECK(res.data.test.size() == 1);
        CHECK(res.data.test.front().rfind("target-dhcp-", 0) == 0);
    }
    CHECK(leakage_audit(r).empty());
    const RunRecord one[] = {r};
    CHECK(count_lines(render_csv(one)) == 1 + 7 * 3);

    spec.methods = {Method::ScratchAblation};
    const auto only = run_inter_site(spec);
    REQUIRE(only.results.size() == 1);
    CHECK(only.timing_s.count("train_source") == 0);
}
