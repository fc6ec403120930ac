#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "sdclab/abft.hpp"

using namespace sdclab;

namespace {
Tensor random_tensor(std::vector<int64_t> shape, uint64_t seed) {
    Tensor t(std::move(shape));
    Rng rng(seed, 0);
    for (int64_t i = 0; i < t.size(); ++i) t.at(i) = static_cast<float>(rng.uniform(-1.0, 1.0));
    return t;
}
}  // namespace

TEST_CASE("unit roundoff constants") {
    CHECK(unit_roundoff(AbftPrecision::f32) == 0x1.0p-23);
    CHECK(unit_roundoff(AbftPrecision::f32) == doctest::Approx(1.1920929e-07));
    CHECK(unit_roundoff(AbftPrecision::bf16) == 0.0078125);
    CHECK(unit_roundoff(AbftPrecision::f16) == 0.0009765625);
    CHECK(unit_roundoff(AbftPrecision::f32, true) == 0x1.0p-24);
    CHECK(unit_roundoff(AbftPrecision::bf16, true) == 0.00390625);
}

TEST_CASE("precision gate at n=4096") {
    auto f32 = precision_gate(4096, unit_roundoff(AbftPrecision::f32));
    CHECK(f32.n_times_u == doctest::Approx(0.00048828125));
    CHECK(f32.pass);
    auto bf16 = precision_gate(4096, unit_roundoff(AbftPrecision::bf16));
    CHECK(bf16.n_times_u == 32.0);
    CHECK(!bf16.pass);
    auto f16 = precision_gate(4096, unit_roundoff(AbftPrecision::f16));
    CHECK(f16.n_times_u == 4.0);
    CHECK(!f16.pass);
}

TEST_CASE("expected fault count helper") {
    CHECK(expected_fault_count(4.78e-3, 1120) == 4.78e-3 * 1120.0);
    CHECK(expected_fault_count(4.78e-3, 1120) == doctest::Approx(5.3536).epsilon(1e-12));
    CHECK(expected_fault_count(0.0, 1000) == 0.0);
}

TEST_CASE("fault-free products never flag under the f32 gate") {
    const double u = unit_roundoff(AbftPrecision::f32);
    int flags = 0;
    for (int trial = 0; trial < 100; ++trial) {
        for (int64_t k : {16, 64, 256}) {
            Tensor a = random_tensor({8, k}, 1000 + static_cast<uint64_t>(trial * 3 + k));
            Tensor b = random_tensor({k, 8}, 2000 + static_cast<uint64_t>(trial * 7 + k));
            Tensor c = matmul(a, b);
            if (check_product(a, b, c, u).flagged) ++flags;
        }
    }
    CHECK(flags == 0);
}

TEST_CASE("single-element corruption above twice the threshold is always flagged") {
    const double u = unit_roundoff(AbftPrecision::f32);
    Rng rng(55, 0);
    for (int trial = 0; trial < 200; ++trial) {
        const int64_t k = 16 + static_cast<int64_t>(rng.uniform_int(100));
        Tensor a = random_tensor({6, k}, 10 + static_cast<uint64_t>(trial));
        Tensor b = random_tensor({k, 6}, 20 + static_cast<uint64_t>(trial));
        Tensor c = matmul(a, b);
        const AbftCheck clean = check_product(a, b, c, u);
        CHECK(!clean.flagged);
        const int64_t i = static_cast<int64_t>(rng.uniform_int(6));
        const int64_t j = static_cast<int64_t>(rng.uniform_int(6));
        c.at(i, j) += static_cast<float>(2.5 * clean.rhs);
        CHECK(check_product(a, b, c, u).flagged);
    }
}

TEST_CASE("corruptions after the comparison point are never flagged") {
    const double u = unit_roundoff(AbftPrecision::f32);
    Tensor a = random_tensor({8, 64}, 1);
    Tensor b = random_tensor({64, 8}, 2);
    Tensor c = matmul(a, b);
    const AbftCheck chk = check_product(a, b, c, u);  // verdict formed here
    CHECK(!chk.flagged);
    c.at(0, 0) *= 1000.0f;  // output overwritten downstream of the check
    CHECK(!chk.flagged);    // the recorded verdict cannot change
}

TEST_CASE("checked_matmul detects in-matmul accumulator corruption") {
    const double u = unit_roundoff(AbftPrecision::f32);
    SdcProfile p;
    p.sites = {Site::matmul_internal};
    p.rate = 0.01;
    p.severity = {SeverityDist::Kind::fixed_factor, 100.0, 1.5, 4.0};
    p.seed = 7;
    Tensor a = random_tensor({32, 64}, 3);
    Tensor b = random_tensor({64, 32}, 4);
    std::vector<FaultEvent> ev;
    auto kernel = [&](const Tensor& x, const Tensor& y) {
        return corrupt_matmul_accumulator(x, y, p, 0, 0, 0, 0, 0, ev);
    };
    CheckedProduct cp = checked_matmul(a, b, u, kernel);
    REQUIRE(!ev.empty());
    CHECK(cp.check.flagged);
    // same product without corruption passes
    CheckedProduct clean = checked_matmul(a, b, u);
    CHECK(!clean.check.flagged);
}

TEST_CASE("bf16 threshold swamps realistic faults") {
    // identical corrupted product: flagged at f32 precision, invisible at bf16
    const Tensor a = random_tensor({8, 64}, 9);
    const Tensor b = random_tensor({64, 8}, 10);
    Tensor c = matmul(a, b);
    c.at(3, 3) += 1.0f;
    CHECK(check_product(a, b, c, unit_roundoff(AbftPrecision::f32)).flagged);
    CHECK(!check_product(a, b, c, unit_roundoff(AbftPrecision::bf16)).flagged);
}

TEST_CASE("run_abft: clean run has zero flags, corrupted run flags and logs") {
    RunOptions o;
    o.model.layers = 1;
    o.model.hidden = 16;
    o.model.heads = 4;
    o.model.kv_heads = 2;
    o.model.seq_len = 8;
    o.model.vocab = 16;
    o.model.tp_degree = 2;
    o.model.grad_accum = 1;
    o.steps = 3;
    o.seed = 5;
    auto dir = std::filesystem::temp_directory_path() / "sdclab_abft_clean";
    std::filesystem::remove_all(dir);
    o.out_dir = dir.string();
    o.profile.rate = 0.0;
    AbftRunResult clean = run_abft(o);
    CHECK(clean.checks > 0);
    CHECK(clean.flags == 0);
    CHECK(clean.event_count == 0);
    CHECK(std::filesystem::exists(dir / "abft.csv"));

    auto dir2 = std::filesystem::temp_directory_path() / "sdclab_abft_inj";
    std::filesystem::remove_all(dir2);
    o.out_dir = dir2.string();
    o.profile.sites = {Site::matmul_internal};
    o.profile.rate = 0.001;
    o.profile.severity = {SeverityDist::Kind::fixed_factor, 50.0, 1.5, 4.0};
    AbftRunResult bad = run_abft(o);
    CHECK(bad.event_count > 0);
    CHECK(bad.flags > 0);
    CHECK(bad.flags <= bad.checks);
}
