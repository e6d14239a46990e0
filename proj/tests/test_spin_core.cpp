#include <gtest/gtest.h>

#include <random>

#include "nvspin/spin_core.hpp"

using namespace nvspin;

namespace {

// Frozen from tests/oracles/levels_oracle.py (mpmath, 50 digits).
constexpr double kGsN14At509[9] = {-5.1033147299360382, -4.7934079311528677, -0.0067526407772586077,
                                   1438.3586193,        1442.3744348571553,  1445.3140272311529,
                                   4287.4273807,        4292.0663177836219,  4294.692695429936};
constexpr double kEsN14Axial[9] = {-3.6644671965589692, 3.0576598661609201, 3.3785210725161419,
                                   1237.0409772084264,  1282.0077251338391, 1335.065385,
                                   1516.6234899881326,  1561.5560939274839, 1614.934615};
constexpr double kEsN14Tilted[9] = {-17.683108922204304, -5.6220442363110739, -0.31078797576057425,
                                    1247.270165478646,   1292.2122389164326,  1345.3556626698977,
                                    1515.237935916872,   1560.147161301072,   1613.3927768513557};

SpinSystemParams gs_oracle_params() {
  auto p = SpinSystemParams::defaults(Species::N14);
  p.A_perp_gs = -2.7;
  return p;
}

void expect_levels(const EigenSystem &es, const double (&want)[9], double tol) {
  ASSERT_EQ(es.dim(), 9);
  for (int k = 0; k < 9; ++k)
    EXPECT_NEAR(es.values[k], want[k], tol) << "level " << k;
}

int total_m2(const BasisLabel &l) { return 2 * l.ms + l.two_mI; }

} // namespace

TEST(SpinOperators, CommutationAndCasimir) {
  for (auto s : {SpinQuantum::half(), SpinQuantum::one()}) {
    const auto m = build_spin_operators(s);
    const double c = s.value() * (s.value() + 1);
    const auto d = s.dim();
    EXPECT_LT((m.x * m.y - m.y * m.x - cplx(0, 1) * m.z).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((m.y * m.z - m.z * m.y - cplx(0, 1) * m.x).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((m.x * m.x + m.y * m.y + m.z * m.z - c * CMatrix::Identity(d, d)).cwiseAbs().maxCoeff(),
              1e-14);
  }
  EXPECT_THROW(build_spin_operators(SpinQuantum{3}), InvalidArgument);
}

TEST(SpinCore, BasisOrderIsMsThenMIDescending) {
  const auto labels = product_basis(SpinQuantum::one());
  ASSERT_EQ(labels.size(), 9u);
  EXPECT_EQ(labels.front(), (BasisLabel{1, 2}));
  EXPECT_EQ(labels[4], (BasisLabel{0, 0}));
  EXPECT_EQ(labels.back(), (BasisLabel{-1, -2}));
  EXPECT_EQ(product_basis(SpinQuantum::half())[1].str(), "(+1,-1/2)");
}

TEST(SpinCore, GroundStateLevelsMatchOracle) {
  const auto es = eigensolve(assemble_hamiltonian(gs_oracle_params(), Orbital::GS, Vec3(0, 0, 509)));
  expect_levels(es, kGsN14At509, 1e-8);
}

TEST(SpinCore, ExcitedStateLevelsMatchOracle) {
  const auto p = SpinSystemParams::defaults(Species::N14);
  expect_levels(eigensolve(assemble_hamiltonian(p, Orbital::ES, Vec3(0, 0, 50))), kEsN14Axial, 1e-8);
  expect_levels(eigensolve(assemble_hamiltonian(p, Orbital::ES, Vec3(40, 0, 48))), kEsN14Tilted, 1e-8);
}

TEST(SpinCore, ZeroFieldWithoutHyperfine) {
  auto p = SpinSystemParams::defaults(Species::C13);
  p.A_par_gs = 0.0;
  const auto es = eigensolve(assemble_hamiltonian(p, Orbital::GS, Vec3::Zero()));
  for (int k = 0; k < 6; ++k)
    EXPECT_NEAR(es.values[k], k < 2 ? 0.0 : 2870.0, 1e-10);
}

TEST(SpinCoreProperty, HermitianTraceAndResidual) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Species sp = static_cast<Species>(trial % 3);
    auto p = SpinSystemParams::defaults(sp);
    p.A_par_gs = 20 * u(rng);
    p.A_perp_gs = 20 * u(rng);
    if (sp == Species::N14)
      p.quad_P_gs = 10 * u(rng);
    const Vec3 b(600 * u(rng), 600 * u(rng), 600 * u(rng));
    const auto h = assemble_hamiltonian(p, Orbital::GS, b);
    ASSERT_TRUE(is_hermitian(h.entries));
    const auto es = eigensolve(h);
    EXPECT_NEAR(es.values.sum(), h.entries.trace().real(), 1e-9);
    const double scale = es.values.cwiseAbs().maxCoeff();
    for (Eigen::Index k = 0; k < es.dim(); ++k) {
      const CVector v = es.vectors.col(k);
      EXPECT_LT((h.entries * v - es.values[k] * v).norm(), 1e-11 * scale);
    }
    EXPECT_LT((es.vectors.adjoint() * es.vectors - CMatrix::Identity(es.dim(), es.dim()))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
  }
}

TEST(SpinCoreProperty, UniformScalingScalesLevels) {
  auto p = gs_oracle_params();
  const auto base = eigensolve(assemble_hamiltonian(p, Orbital::GS, Vec3(10, 20, 509)));
  const double s = 3.5;
  p.zfs_gs *= s;
  p.A_par_gs *= s;
  p.A_perp_gs *= s;
  p.quad_P_gs *= s;
  p.gamma_e *= s;
  p.species.gamma_n *= s;
  const auto scaled = eigensolve(assemble_hamiltonian(p, Orbital::GS, Vec3(10, 20, 509)));
  for (Eigen::Index k = 0; k < 9; ++k)
    EXPECT_NEAR(scaled.values[k], s * base.values[k], 1e-9 * std::abs(s * base.values[k]) + 1e-10);
}

TEST(SpinCoreProperty, AxialFieldConservesTotalM) {
  const auto p = SpinSystemParams::defaults(Species::N14);
  for (double bz : {0.0, 120.0, 507.0, 900.0}) {
    const auto h = assemble_hamiltonian(p, Orbital::ES, Vec3(0, 0, bz));
    for (std::size_t i = 0; i < 9; ++i)
      for (std::size_t j = 0; j < 9; ++j)
        if (total_m2(h.labels[i]) != total_m2(h.labels[j])) {
          EXPECT_EQ(std::abs(h.entries(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))), 0.0);
        }
  }
  const auto tilted = assemble_hamiltonian(p, Orbital::ES, Vec3(40, 0, 48));
  EXPECT_GT(std::abs(tilted.entries(0, 3)), 0.0);
}

TEST(SpinCore, ContactOverrideEqualsAxialWithEqualComponents) {
  auto p = SpinSystemParams::defaults(Species::N15);
  const auto a = assemble_hamiltonian(p, Orbital::ES, Vec3(0, 0, 300), Hyperfine::contact(61.0));
  p.A_par_es = p.A_perp_es = 61.0;
  const auto b = assemble_hamiltonian(p, Orbital::ES, Vec3(0, 0, 300));
  EXPECT_EQ((a.entries - b.entries).cwiseAbs().maxCoeff(), 0.0);
}

TEST(SpinCore, RejectsNonFiniteAndBadParameters) {
  auto p = SpinSystemParams::defaults(Species::N14);
  EXPECT_THROW(assemble_hamiltonian(p, Orbital::GS, Vec3(0, 0, std::nan(""))), InvalidArgument);
  p.zfs_gs = -1.0;
  EXPECT_THROW(assemble_hamiltonian(p, Orbital::GS, Vec3::Zero()), InvalidArgument);
  auto q = SpinSystemParams::defaults(Species::C13);
  q.quad_P_gs = 1.0;
  EXPECT_THROW(q.validate(), InvalidArgument);
  CMatrix nh = CMatrix::Zero(2, 2);
  nh(0, 1) = 1.0;
  EXPECT_THROW(eigensolve(nh), InvalidArgument);
}

TEST(SpinCore, PhaseConventionIsDeterministic) {
  const auto h = assemble_hamiltonian(gs_oracle_params(), Orbital::GS, Vec3(30, 10, 200));
  const auto a = eigensolve(h), b = eigensolve(h);
  EXPECT_EQ((a.vectors - b.vectors).cwiseAbs().maxCoeff(), 0.0);
  for (Eigen::Index k = 0; k < 9; ++k) {
    const auto [i, w] = a.dominant(k);
    EXPECT_NEAR(a.vectors(i, k).imag(), 0.0, 1e-15);
    EXPECT_GT(a.vectors(i, k).real(), 0.0);
    EXPECT_GT(w, 0.0);
  }
}

TEST(SpinCore, TransitionCatalogSortedAndLabeled) {
  const auto p = SpinSystemParams::defaults(Species::N14);
  const auto es = eigensolve(assemble_hamiltonian(p, Orbital::GS, Vec3(0, 0, 509)));
  const auto cat = transition_catalog(es, drive_coupling(p, Vec3(1, 0, 0)));
  ASSERT_FALSE(cat.empty());
  for (std::size_t i = 1; i < cat.size(); ++i)
    EXPECT_LE(cat[i - 1].freq, cat[i].freq);
  // strongest ESR lines: m_s 0 -> -1 with m_I conserved, near Delta - gamma_e B
  bool found = false;
  for (const auto &t : cat)
    if (t.lower_label && t.upper_label && t.lower_label->ms == 0 && t.upper_label->ms == -1 &&
        t.lower_label->two_mI == 2 && t.upper_label->two_mI == 2) {
      EXPECT_NEAR(t.freq, 2870 - 2.799 * 509, 5.0);
      found = true;
    }
  EXPECT_TRUE(found);
  EXPECT_THROW(transition_catalog(es, CMatrix::Identity(3, 3)), DimensionError);
}

TEST(Eslac, DefaultN14NearFiveHundredTenGauss) {
  const double b = eslac_field(SpinSystemParams::defaults(Species::N14));
  EXPECT_NEAR(b, 507.32, 0.05);
  EXPECT_NEAR(b, 1420.0 / 2.799, 1e-6);
}

TEST(Eslac, NoCrossingInRangeThrows) {
  EXPECT_THROW(eslac_field(SpinSystemParams::defaults(Species::N14), 0.0, 100.0), ConvergenceError);
}
