#include <cstring>
#include <filesystem>
#include <unistd.h>

#include "doctest.h"
#include "fodshift/io.hpp"
#include "fodshift/rng.hpp"

using namespace fodshift;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        static int n = 0;
        path = fs::temp_directory_path() / ("fodshift_io_" + std::to_string(::getpid()) + "_" + std::to_string(++n));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

template <class T>
Volume<T> random_volume(Dims d, int nc, std::uint64_t seed) {
    Rng rng(seed);
    Volume<T> v(d, nc);
    for (auto& x : v.data()) {
        if constexpr (std::is_same_v<T, unsigned char>) x = static_cast<unsigned char>(rng.below(256));
        else x = static_cast<T>(rng.uniform(-1e3, 1e3));
    }
    return v;
}

std::uint32_t le32(const std::string& b, std::size_t at) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(b[at])) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 1])) << 8 |
           static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 2])) << 16 |
           static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 3])) << 24;
}

}  // namespace

TEST_CASE("volume encoding has the documented layout") {
    Volume<float> v(Dims{3, 2, 2}, 2);
    for (std::size_t i = 0; i < v.voxels(); ++i) {
        v(i, 0) = static_cast<float>(i);
        v(i, 1) = 100.0f + static_cast<float>(i);
    }
    const std::string b = encode_volume(v, 1.5);
    REQUIRE(b.size() == kVolumeHeaderBytes + 12 * 2 * 4);
    CHECK(b.substr(0, 4) == "FODS");
    CHECK(le32(b, 4) == kVolumeVersion);
    CHECK(le32(b, 8) == 3);
    CHECK(le32(b, 12) == 2);
    CHECK(le32(b, 16) == 2);
    CHECK(le32(b, 20) == 2);
    CHECK(le32(b, 24) == static_cast<std::uint32_t>(DType::F32));
    double vs;
    std::memcpy(&vs, b.data() + 28, 8);
    CHECK(vs == 1.5);
    // channel 0 for every voxel (x fastest), then channel 1
    auto f32_at = [&](std::size_t k) {
        const std::uint32_t u = le32(b, kVolumeHeaderBytes + 4 * k);
        float f;
        std::memcpy(&f, &u, 4);
        return f;
    };
    CHECK(f32_at(0) == 0.0f);
    CHECK(f32_at(1) == 1.0f);
    CHECK(f32_at(11) == 11.0f);
    CHECK(f32_at(12) == 100.0f);
    CHECK(f32_at(23) == 111.0f);
}

TEST_CASE("volume round trips are byte exact") {
    TempDir tmp;
    const auto f = random_volume<float>(Dims{5, 4, 3}, 7, 1);
    const auto d = random_volume<double>(Dims{2, 3, 4}, 2, 2);
    const auto u = random_volume<unsigned char>(Dims{4, 4, 4}, 1, 3);
    write_volume(tmp.path / "f.raw", f, 1.5);
    write_volume(tmp.path / "d.raw", d);
    write_volume(tmp.path / "u.raw", u, 2.0);

    VolumeHeader h;
    CHECK(read_volume<float>(tmp.path / "f.raw", &h) == f);
    CHECK(h.voxel_size_mm == 1.5);
    CHECK(h.nc == 7);
    CHECK(read_volume<double>(tmp.path / "d.raw") == d);
    CHECK(read_volume<unsigned char>(tmp.path / "u.raw") == u);

    const std::string bytes = read_file(tmp.path / "f.raw");
    CHECK(encode_volume(decode_volume<float>(bytes), 1.5) == bytes);
    // no temporary files left behind
    int n = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(tmp.path)) ++n;
    CHECK(n == 3);
}

TEST_CASE("volume parse errors name the offset") {
    const std::string good = encode_volume(random_volume<float>(Dims{2, 2, 2}, 3, 4));

    std::string bad = good;
    bad[0] = 'X';
    try {
        decode_volume<float>(bad);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.offset() == 0);
        CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
    }

    bad = good;
    bad[4] = 9;
    CHECK_THROWS_AS(decode_volume<float>(bad), ParseError);

    bad = good.substr(0, good.size() - 1);
    try {
        decode_volume<float>(bad);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.offset() == bad.size());
    }

    CHECK_THROWS_AS(decode_volume<float>(good + "x"), ParseError);
    CHECK_THROWS_AS(decode_volume<float>(good.substr(0, 20)), ParseError);
    CHECK_THROWS_AS(decode_volume<double>(good), ParseError);
    CHECK_THROWS_AS(decode_volume<float>(""), ParseError);

    bad = good;
    bad[8] = 0;  // nx = 0
    try {
        decode_volume<float>(bad);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.offset() == 8);
    }
}

TEST_CASE("gradient table parsing") {
    SUBCASE("single line") {
        const auto g = parse_gradient_table("0 0 1 1000");
        REQUIRE(g.size() == 1);
        CHECK(g.directions[0] == Direction{0, 0, 1});
        CHECK(g.b_values[0] == 1000.0);
    }
    SUBCASE("comments, blank lines, tabs, CRLF, b0 rows") {
        const auto g = parse_gradient_table("# header\n\n0 0 0 0\r\n  1\t0 0   500\n# end\n0 3 4 2000\n");
        REQUIRE(g.size() == 3);
        CHECK(g.b_values[0] == 0.0);
        CHECK(g.directions[1] == Direction{1, 0, 0});
        CHECK(g.directions[2].y == doctest::Approx(0.6).epsilon(1e-15));
        CHECK(g.directions[2].z == doctest::Approx(0.8).epsilon(1e-15));
    }
    SUBCASE("errors carry line numbers") {
        auto line_of = [](const std::string& text) -> std::size_t {
            try {
                parse_gradient_table(text);
            } catch (const ParseError& e) {
                return e.offset();
            }
            return 0;
        };
        CHECK(line_of("0 0 1 1000\n0 0 1\n") == 2);
        CHECK(line_of("# c\n0 0 1 1000 5\n") == 2);
        CHECK(line_of("0 0 1 1000\n\n0 x 1 1000\n") == 3);
        CHECK(line_of("0 0 0 1000\n") == 1);
        CHECK(line_of("0 0 1 -5\n") == 1);
        CHECK(line_of("0 0 1 1e400\n") == 1);
        const std::string msg = [] {
            try {
                parse_gradient_table("0 0 1 10z0");
            } catch (const ParseError& e) {
                return std::string(e.what());
            }
            return std::string();
        }();
        CHECK(msg.find("line 1") != std::string::npos);
    }
    SUBCASE("round trip of a protocol table is exact") {
        TempDir tmp;
        const auto g = protocol_directions(dhcp_like().protocol);
        write_gradient_table(tmp.path / "grad.txt", g);
        const auto r = read_gradient_table(tmp.path / "grad.txt");
        REQUIRE(r.size() == g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            CHECK(r.b_values[i] == g.b_values[i]);
            CHECK(r.directions[i] == g.directions[i]);
        }
        CHECK(format_gradient_table(r) == read_file(tmp.path / "grad.txt"));
    }
}

TEST_CASE("model files") {
    TempDir tmp;
    const auto m = make_estimator(11, {16, 8}, 0.25);
    write_model(tmp.path / "m.fodm", m);
    const auto r = read_model(tmp.path / "m.fodm");
    CHECK(r == m);
    const std::string bytes = read_file(tmp.path / "m.fodm");
    CHECK(encode_model(r) == bytes);
    CHECK(bytes.substr(0, 4) == "FODM");
    const std::size_t header = 4 + 4 + 4 + 4 * m.layer_dims.size() + 8 + 8;
    CHECK(bytes.size() == header + 4 * m.parameter_count());

    std::string bad = bytes;
    bad[1] = '?';
    try {
        decode_model(bad);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.offset() == 0);
    }
    CHECK_THROWS_AS(decode_model(bytes.substr(0, bytes.size() - 3)), ParseError);
    CHECK_THROWS_AS(decode_model(bytes + std::string(4, '\0')), ParseError);
    CHECK_THROWS_AS(decode_model(bytes.substr(0, 10)), ParseError);
    CHECK_THROWS_AS(decode_volume<float>(bytes), ParseError);
}

TEST_CASE("mapping files") {
    TempDir tmp;
    MomMapping m{random_volume<double>(Dims{3, 3, 2}, 1, 5), random_volume<double>(Dims{3, 3, 2}, 1, 6)};
    write_mapping(tmp.path / "mapping.raw", m);
    const auto r = read_mapping(tmp.path / "mapping.raw");
    CHECK(r.alpha == m.alpha);
    CHECK(r.beta == m.beta);
    write_volume(tmp.path / "one.raw", m.alpha);
    CHECK_THROWS_AS(read_mapping(tmp.path / "one.raw"), ParseError);
}

TEST_CASE("JSON files and training configs") {
    TempDir tmp;
    nlohmann::json j{{"zeta", 1}, {"alpha", {{"b", 0.1}, {"a", "x"}}}};
    write_json(tmp.path / "a.json", j);
    const std::string text = read_file(tmp.path / "a.json");
    CHECK(text.find("\"alpha\"") < text.find("\"zeta\""));
    CHECK(read_json(tmp.path / "a.json") == j);
    CHECK(dump_json(read_json(tmp.path / "a.json")) == text);

    atomic_write(tmp.path / "broken.json", "{\"a\": ");
    CHECK_THROWS_AS(read_json(tmp.path / "broken.json"), ParseError);

    TrainConfig c = TrainConfig::finetune_defaults();
    c.lr = 1.0 / 3.0;
    c.seed = 0xFFFFFFFFFFFFFFFFull;
    const auto back = train_config_from_json(nlohmann::json::parse(train_config_to_json(c).dump()));
    CHECK(back.lr == c.lr);
    CHECK(back.seed == c.seed);
    CHECK(back.epochs == c.epochs);
    CHECK(back.batch_size == c.batch_size);

    const auto partial = train_config_from_json(nlohmann::json{{"epochs", 7}}, TrainConfig::finetune_defaults());
    CHECK(partial.epochs == 7);
    CHECK(partial.lr == TrainConfig::finetune_defaults().lr);
    CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epoch", 7}}), InvalidArgument);
    CHECK_THROWS_AS(train_config_from_json(nlohmann::json{{"epochs", -1}}), InvalidArgument);
}

TEST_CASE("subjects and cohorts round trip") {
    TempDir tmp;
    CohortConfig cfg;
    cfg.preset = bcp_like();
    cfg.label = "bcp";
    cfg.n_subjects = 2;
    cfg.grid = Dims{6, 6, 6};
    const auto subs = build_cohort(cfg);
    write_cohort(tmp.path / "cohort", subs);
    for (const char* f : {"dwi.raw", "fod.raw", "mask.raw", "class.raw", "grad.txt", "meta.json"})
        CHECK(fs::exists(tmp.path / "cohort" / subs[0].id / f));

    const auto back = read_cohort(tmp.path / "cohort");
    REQUIRE(back.size() == subs.size());
    for (std::size_t i = 0; i < subs.size(); ++i) {
        const auto& a = subs[i];
        const auto& b = back[i];
        CHECK(b.id == a.id);
        CHECK(b.age == a.age);
        CHECK(b.site_label == a.site_label);
        CHECK(b.seed == a.seed);
        CHECK(b.lmax == a.lmax);
        CHECK(b.voxel_size_mm == a.voxel_size_mm);
        CHECK(b.dims == a.dims);
        CHECK(b.dwi == a.dwi);
        CHECK(b.gt_fod == a.gt_fod);
        CHECK(b.wm_mask == a.wm_mask);
        CHECK(b.fiber_class == a.fiber_class);
        CHECK(b.gradients.b_values == a.gradients.b_values);
        CHECK(b.gradients.directions == a.gradients.directions);
        CHECK(b.tissue.fiber_fa == a.tissue.fiber_fa);
        CHECK(b.tissue.lambda_perp == a.tissue.lambda_perp);
        CHECK(b.voxels.empty());
    }

    // writing what was read reproduces every file byte for byte
    write_cohort(tmp.path / "again", back);
    for (const auto& s : subs)
        for (const char* f : {"dwi.raw", "fod.raw", "mask.raw", "class.raw", "grad.txt", "meta.json"})
            CHECK(read_file(tmp.path / "cohort" / s.id / f) == read_file(tmp.path / "again" / s.id / f));
    CHECK(read_file(tmp.path / "cohort" / "cohort.json") == read_file(tmp.path / "again" / "cohort.json"));

    // inconsistent files are rejected
    write_volume(tmp.path / "cohort" / subs[0].id / "mask.raw", Mask(Dims{5, 6, 6}, 1));
    CHECK_THROWS_AS(read_subject(tmp.path / "cohort" / subs[0].id), InvalidArgument);
    CHECK_THROWS(read_subject(tmp.path / "missing"));
}
