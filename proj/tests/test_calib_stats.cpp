// SPDX-License-Identifier: Apache-2.0

#include "mlprune/calib_stats.hpp"
#include "oracle/instances.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace mlprune;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

const SiteId kSite{0, SiteKind::AttnIn};

MatrixF rows_to_matrix(const oracle::Rows & rows) {
    MatrixF m(rows.size(), rows.at(0).size());
    for (std::size_t t = 0; t < rows.size(); ++t) {
        for (std::size_t j = 0; j < rows[t].size(); ++j) {
            m(t, j) = static_cast<float>(rows[t][j]);
        }
    }
    return m;
}

void check_rel(const std::vector<double> & got, const oracle::Vec & want, double tol) {
    REQUIRE(got.size() == want.size());
    for (std::size_t j = 0; j < got.size(); ++j) {
        if (want[j] == 0.0) {
            CHECK(std::fabs(got[j]) <= tol);
        } else {
            CHECK_THAT(got[j], WithinRel(want[j], tol));
        }
    }
}

} // namespace

TEST_CASE("construction validates languages and eps", "[stats]") {
    CHECK_THROWS_WITH(CalibStats({}, 0.0, {}), ContainsSubstring("no languages"));
    CHECK_THROWS_WITH(CalibStats({"en", "en"}, 0.0, {}), ContainsSubstring("duplicate language"));
    CHECK_THROWS_AS(CalibStats({"e,n"}, 0.0, {}), Error);
    CHECK_THROWS_AS(CalibStats({"en"}, -1.0, {}), Error);
    CHECK_THROWS_AS(CalibStats({"en"}, 0.0, {{kSite, 2}, {kSite, 2}}), Error);
}

TEST_CASE("accumulate checks shapes and boundaries", "[stats]") {
    CalibStats stats({"en"}, 0.0, {{kSite, 3}});
    MatrixF    m(4, 2);
    CHECK_THROWS_WITH(stats.accumulate(kSite, "en", m.view()), ContainsSubstring("dimension mismatch"));
    MatrixF ok(4, 3);
    CHECK_THROWS_WITH(stats.accumulate(kSite, "xx", ok.view()), ContainsSubstring("unknown language"));
    CHECK_THROWS_AS(stats.accumulate({1, SiteKind::AttnIn}, "en", ok.view()), Error);
    const std::vector<std::size_t> bad{0, 2, 2};
    CHECK_THROWS_AS(stats.accumulate(kSite, "en", ok.view(), bad), Error);
    const std::vector<std::size_t> late{1};
    CHECK_THROWS_AS(stats.accumulate(kSite, "en", ok.view(), late), Error);
}

TEST_CASE("hand-computed two-token example", "[stats]") {
    CalibStats stats({"en", "de"}, 0.5, {{kSite, 2}});
    MatrixF    a(2, 2, std::vector<float>{1, 0, 3, -2});
    MatrixF    b(2, 2, std::vector<float>{2, 1, 2, 1});
    stats.accumulate(kSite, "en", a.view());
    stats.accumulate(kSite, "de", b.view());

    const auto & en = stats.at(kSite, "en");
    CHECK(en.token_count == 2);
    CHECK(en.sum_sq == std::vector<double>{10.0, 4.0});
    CHECK(en.mean() == std::vector<double>{2.0, -1.0});
    CHECK(en.count_above_eps == std::vector<std::uint64_t>{2, 1});

    CHECK(pooled_l2(stats, kSite) == std::vector<double>{std::sqrt(18.0), std::sqrt(6.0)});
    // means en (2, -1), de (2, 1): inter variance (0, 1)
    CHECK(inter_variance(stats, kSite) == std::vector<double>{0.0, 1.0});
    CHECK(activation_probability(stats, kSite) == std::vector<double>{1.0, 0.75});
    CHECK_THROWS_WITH(intra_variance(stats, kSite, "en"), ContainsSubstring("fewer than 2 samples"));
}

TEST_CASE("sample boundaries split one batch into several sequences", "[stats]") {
    CalibStats                     one({"en"}, 0.0, {{kSite, 1}});
    CalibStats                     split_stats({"en"}, 0.0, {{kSite, 1}});
    MatrixF                        all(5, 1, std::vector<float>{1, 2, 3, 4, 5});
    const std::vector<std::size_t> starts{0, 2};
    one.accumulate(kSite, "en", all.view(), starts);
    MatrixF first(2, 1, std::vector<float>{1, 2});
    MatrixF second(3, 1, std::vector<float>{3, 4, 5});
    split_stats.accumulate(kSite, "en", first.view());
    split_stats.accumulate(kSite, "en", second.view());
    CHECK(one.at(kSite, "en").sample_means == split_stats.at(kSite, "en").sample_means);
    CHECK(one.at(kSite, "en").sample_means(0, 0) == 1.5);
    CHECK(one.at(kSite, "en").sample_means(1, 0) == 4.0);
    // sample means (1.5, 4): variance 1.5625
    CHECK(intra_variance(one, kSite, "en") == std::vector<double>{1.5625});
}

TEST_CASE("eps = 0 yields probability one everywhere", "[stats]") {
    CalibStats stats({"en"}, 0.0, {{kSite, 2}});
    MatrixF    m(2, 2, std::vector<float>{0, 0, 0, 1});
    stats.accumulate(kSite, "en", m.view());
    CHECK(activation_probability(stats, kSite) == std::vector<double>{1.0, 1.0});
}

TEST_CASE("streaming equals batch recomputation on random corpora", "[stats][property]") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto inst  = oracle::random_instance(seed, 4, 6, 3, 5, 7);
        const auto stats = oracle::stats_from(inst.site, inst.languages, 5e-5);
        check_rel(pooled_l2(stats, kSite), oracle::column_l2(inst.site), 1e-12);
        check_rel(inter_variance(stats, kSite), oracle::var_inter(inst.site), 1e-9);
        check_rel(activation_probability(stats, kSite), oracle::probability(inst.site, 5e-5), 1e-12);
        for (std::size_t l = 0; l < inst.languages.size(); ++l) {
            check_rel(stats.at(kSite, inst.languages[l]).mean(), oracle::language_mean(inst.site.langs[l], 6), 1e-12);
            check_rel(intra_variance(stats, kSite, inst.languages[l]), oracle::var_intra(inst.site.langs[l], 6), 1e-9);
        }
    }
}

TEST_CASE("accumulation is order-independent up to rounding", "[stats]") {
    const auto inst = oracle::random_instance(3, 4, 5, 2, 6, 5);
    CalibStats fwd(inst.languages, 1e-3, {{kSite, 5}});
    CalibStats rev(inst.languages, 1e-3, {{kSite, 5}});
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t s = 0; s < 6; ++s) {
            fwd.accumulate(kSite, inst.languages[l], rows_to_matrix(inst.site.langs[l][s]).view());
            rev.accumulate(kSite, inst.languages[1 - l], rows_to_matrix(inst.site.langs[1 - l][5 - s]).view());
        }
    }
    for (const auto & lang : inst.languages) {
        const auto & a = fwd.at(kSite, lang);
        const auto & b = rev.at(kSite, lang);
        CHECK(a.count_above_eps == b.count_above_eps);
        CHECK(a.token_count == b.token_count);
        for (std::size_t j = 0; j < 5; ++j) {
            CHECK_THAT(a.sum_sq[j], WithinRel(b.sum_sq[j], 1e-12));
        }
    }
    check_rel(mean_intra_variance(fwd, kSite), mean_intra_variance(rev, kSite), 1e-9);
}

TEST_CASE("container round trip", "[stats][container]") {
    const auto inst  = oracle::random_instance(4, 3, 5, 3, 3, 4);
    const auto stats = oracle::stats_from(inst.site, inst.languages, 1e-7);
    const auto c     = stats.to_container();
    CHECK(c.meta("languages") == "l0,l1,l2");
    CHECK(c.meta("token_counts") == "l0:12,l1:12,l2:12");
    CHECK(c.meta("eps") == "9.9999999999999995e-08");

    const auto back = CalibStats::from_container(parse(serialize(c)));
    CHECK(back.languages() == stats.languages());
    CHECK(back.eps() == stats.eps());
    CHECK(back.sites() == stats.sites());
    for (const auto & lang : inst.languages) {
        const auto & a = stats.at(kSite, lang);
        const auto & b = back.at(kSite, lang);
        CHECK(a.count_above_eps == b.count_above_eps);
        CHECK(a.n_samples() == b.n_samples());
        for (std::size_t j = 0; j < 5; ++j) {
            CHECK_THAT(b.sum_sq[j], WithinRel(a.sum_sq[j], 1e-6));
            CHECK_THAT(b.mean()[j], WithinAbs(a.mean()[j], 1e-6));
        }
    }
    // Serialising the loaded stats reproduces the same bytes.
    CHECK(serialize(back.to_container()) == serialize(c));
}

TEST_CASE("from_container rejects inconsistent files", "[stats][container]") {
    const auto inst = oracle::random_instance(5, 3, 4, 2, 2, 3);
    const auto good = oracle::stats_from(inst.site, inst.languages, 1e-3).to_container();

    auto c = good;
    c.metadata["token_counts"] = "l0:6";
    CHECK_THROWS_WITH(CalibStats::from_container(c), ContainsSubstring("no token count"));

    c = good;
    c.metadata["eps"] = "abc";
    CHECK_THROWS_WITH(CalibStats::from_container(c), ContainsSubstring("malformed eps"));

    c = good;
    for (auto & r : c.records) {
        if (r.name.ends_with("count_above_eps")) {
            r.data[0] = 1000.0f;
        }
    }
    CHECK_THROWS_WITH(CalibStats::from_container(c), ContainsSubstring("count_above_eps"));

    c = good;
    c.records.pop_back();
    CHECK_THROWS_AS(CalibStats::from_container(c), Error);
}

TEST_CASE("language diversity is mean pairwise cosine similarity", "[stats]") {
    std::map<std::string, std::vector<double>> v{{"a", {1, 0}}, {"b", {0, 1}}, {"c", {1, 1}}};
    // pairs: 0, 1/sqrt2, 1/sqrt2
    CHECK_THAT(language_diversity(v), WithinAbs(2.0 / std::sqrt(2.0) / 3.0, 1e-15));
    CHECK_THROWS_AS(language_diversity({{"a", {1.0}}}), Error);
    CHECK_THROWS_WITH(cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{1, 0}), ContainsSubstring("zero-norm"));
}
