// SPDX-License-Identifier: Apache-2.0

#include "mlprune/criteria.hpp"
#include "mlprune/masker.hpp"
#include "oracle/instances.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace mlprune;

namespace {

const SiteId kSite{0, SiteKind::AttnIn};

struct KindPair {
    CriterionKind prod;
    oracle::Kind  ref;
};

const KindPair kKinds[] = {
    {CriterionKind::Magnitude, oracle::Kind::Magnitude},
    {CriterionKind::Wanda, oracle::Kind::Wanda},
    {CriterionKind::MWanda, oracle::Kind::MWanda},
    {CriterionKind::Ria, oracle::Kind::Ria},
    {CriterionKind::MRia, oracle::Kind::MRia},
};

double rel_error(double got, double want) {
    const double scale = std::max(std::fabs(got), std::fabs(want));
    return scale == 0.0 ? 0.0 : std::fabs(got - want) / scale;
}

} // namespace

TEST_CASE("criteria match the straight-line reference", "[oracle][property]") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const auto inst  = oracle::random_instance(1000 + seed);
        const auto w     = oracle::to_rows(inst.weights);
        const double eps = seed % 3 == 0 ? 0.0 : 5e-5;
        const auto stats = oracle::stats_from(inst.site, inst.languages, eps);
        for (const auto & k : kKinds) {
            const double          lambda = seed % 5 == 0 ? 0.0 : 0.2;
            const CriterionConfig cfg{k.prod, lambda, eps, 0.5};
            const auto            got  = score(cfg, inst.weights.view(), site_signals(cfg, stats, kSite));
            const auto            want = oracle::reference_scores(w, inst.site, {k.ref, lambda, eps, 0.5});
            double                worst = 0.0;
            for (std::size_t i = 0; i < 8; ++i) {
                for (std::size_t j = 0; j < 8; ++j) {
                    worst = std::max(worst, rel_error(got.scores(i, j), want[i][j]));
                }
            }
            INFO("seed " << seed << " criterion " << criterion_name(k.prod));
            REQUIRE(worst <= 1e-12);

            std::vector<double> flat;
            for (const auto & row : want) {
                flat.insert(flat.end(), row.begin(), row.end());
            }
            const auto by_row = build_mask(got, 0.5, Grouping::PerOutputRow);
            for (std::size_t i = 0; i < 8; ++i) {
                const auto ref = oracle::reference_prune_group(want[i], 4);
                for (std::size_t j = 0; j < 8; ++j) {
                    REQUIRE(by_row.keep(i, j) == !ref[j]);
                }
            }
            const auto by_layer = build_mask(got, 0.5, Grouping::PerLayer);
            const auto ref      = oracle::reference_prune_group(flat, 32);
            for (std::size_t i = 0; i < flat.size(); ++i) {
                REQUIRE(by_layer.keep_flat(i) == !ref[i]);
            }
        }
    }
}

TEST_CASE("specialised feature is pruned by Wanda and kept by M-Wanda", "[oracle][specialization]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto inst  = oracle::specialization_instance(seed);
        const auto stats = oracle::stats_from(inst.site, inst.languages, 5e-5);
        INFO("seed " << seed);

        const CriterionConfig wanda{CriterionKind::Wanda, 0.2, 5e-5, 0.5};
        const CriterionConfig mwanda{CriterionKind::MWanda, 0.2, 5e-5, 0.5};
        const auto            a = build_mask(score(wanda, inst.weights.view(), site_signals(wanda, stats, kSite)), 0.5, Grouping::PerOutputRow);
        const auto            b = build_mask(score(mwanda, inst.weights.view(), site_signals(mwanda, stats, kSite)), 0.5, Grouping::PerOutputRow);
        for (std::size_t r = 0; r < inst.weights.rows(); ++r) {
            CHECK_FALSE(a.keep(r, inst.specialised));
            CHECK(b.keep(r, inst.specialised));
            CHECK(a.keep(r, inst.comparison));
            CHECK_FALSE(b.keep(r, inst.comparison));
        }
    }
}

TEST_CASE("oracle sanity on a hand instance", "[oracle]") {
    // Two languages, one sample of two tokens each.
    oracle::RawSite site;
    site.langs = {{{{1.0, 0.0}, {3.0, -2.0}}}, {{{2.0, 1.0}, {2.0, 1.0}}}};
    CHECK(oracle::column_l2(site) == oracle::Vec{std::sqrt(18.0), std::sqrt(6.0)});
    CHECK(oracle::var_inter(site) == oracle::Vec{0.0, 1.0});
    CHECK(oracle::probability(site, 0.5) == oracle::Vec{1.0, 0.75});
    CHECK(oracle::min_subset_sum({3, 1, 2}, 2) == 3.0);
}
