import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from fuseode import diffarray as da
from fuseode.multistep import (
    ORDER_CSV_HEADER,
    ConfigurationError,
    HistoryUnderflowError,
    IvpProblem,
    RhsHistory,
    UnsupportedSchemeError,
    ab_step,
    adaptive_bootstrap,
    am_step,
    empirical_order,
    final_error,
    order_rows,
    pc,
    pc_step,
    pure_ab,
    scheme_coeffs,
    solve_ivp,
)

F = Fraction

# reference coefficients, oldest first
REFERENCE = {
    ("AB", 1): [F(1)],
    ("AB", 2): [F(-1, 2), F(3, 2)],
    ("AB", 3): [F(5, 12), F(-16, 12), F(23, 12)],
    ("AB", 4): [F(-9, 24), F(37, 24), F(-59, 24), F(55, 24)],
    ("AM", 1): [F(1, 2), F(1, 2)],
    ("AM", 2): [F(-1, 12), F(8, 12), F(5, 12)],
    ("AM", 3): [F(1, 24), F(-5, 24), F(19, 24), F(9, 24)],
}


def decay():
    return IvpProblem(lambda t, y: -y, [1.0], 0.0, 1.0, lambda t: np.array([math.exp(-t)]))


def history(values, start=0):
    h = RhsHistory()
    for k, v in enumerate(values, start=start):
        h.push(k, np.atleast_1d(np.asarray(v, dtype=float)))
    return h


class CountingHistory(RhsHistory):
    def __init__(self):
        super().__init__()
        self.reads = []

    def window(self, k):
        self.reads.append(k)
        return super().window(k)


# ------------------------------------------------------------ coefficients


@pytest.mark.parametrize("key", sorted(REFERENCE))
def test_coefficients_match_table(key):
    scheme = scheme_coeffs(*key)
    assert list(scheme.b) == REFERENCE[key]
    assert scheme.order == (key[1] if key[0] == "AB" else key[1] + 1)


@pytest.mark.parametrize("key", sorted(REFERENCE))
def test_coefficients_sum_to_one(key):
    assert sum(scheme_coeffs(*key).b) == 1


def test_explicit_vs_implicit_length():
    for s in range(1, 5):
        assert len(scheme_coeffs("AB", s).b) == s
    for s in range(1, 4):
        b = scheme_coeffs("AM", s).b
        assert len(b) == s + 1 and b[-1] != 0


def test_fraction_strings_keep_table_denominators():
    assert scheme_coeffs("AB", 4).fraction_strings() == ["-9/24", "37/24", "-59/24", "55/24"]
    assert scheme_coeffs("AB", 3).fraction_strings() == ["5/12", "-16/12", "23/12"]


@pytest.mark.parametrize("family,steps", [("AB", 0), ("AB", 5), ("AM", 4), ("BDF", 2)])
def test_unsupported_schemes(family, steps):
    with pytest.raises(UnsupportedSchemeError):
        scheme_coeffs(family, steps)


# ------------------------------------------------------------ history


def test_history_fifo():
    h = RhsHistory()
    for k in range(6):
        h.push(k, k * 10)
    assert h.indices() == [2, 3, 4, 5]
    assert h.window(2) == [40, 50]
    with pytest.raises(HistoryUnderflowError):
        h.window(5)


def test_history_requires_consecutive_nodes():
    h = RhsHistory()
    h.push(3, 0.0)
    with pytest.raises(ValueError):
        h.push(5, 0.0)


def test_steps_read_only_their_window():
    for s in range(1, 5):
        h = CountingHistory()
        for k in range(4):
            h.push(k, np.array([1.0]))
        ab_step(scheme_coeffs("AB", s), np.array([0.0]), h, 0.1)
        assert h.reads == [s]
    for s in range(1, 4):
        h = CountingHistory()
        for k in range(4):
            h.push(k, np.array([1.0]))
        am_step(scheme_coeffs("AM", s), np.array([0.0]), h, np.array([1.0]), 0.1)
        assert h.reads == [s]


def test_history_underflow():
    with pytest.raises(HistoryUnderflowError):
        ab_step(scheme_coeffs("AB", 3), np.zeros(1), history([1.0, 2.0]), 0.1)
    with pytest.raises(HistoryUnderflowError):
        am_step(scheme_coeffs("AM", 3), np.zeros(1), history([1.0]), np.ones(1), 0.1)


# ------------------------------------------------------------ single steps


def test_ab_zero_dynamics():
    y = np.array([2.5, -1.0])
    for s in range(1, 5):
        out = ab_step(scheme_coeffs("AB", s), y, history([np.zeros(2)] * s), 0.3)
        assert np.array_equal(out, y)


def test_ab1_euler():
    out = ab_step(scheme_coeffs("AB", 1), np.array([1.0]), history([-1.0]), 0.1)
    assert_allclose(out, [0.9], rtol=0, atol=1e-16)


def test_ab4_direct_formula():
    d, t = 0.1, 0.3
    f = [-math.exp(-(t - 3 * d)), -math.exp(-(t - 2 * d)), -math.exp(-(t - d)), -math.exp(-t)]
    y = math.exp(-t)
    expected = y + d / 24 * (55 * f[3] - 59 * f[2] + 37 * f[1] - 9 * f[0])
    out = ab_step(scheme_coeffs("AB", 4), np.array([y]), history(f), d)
    assert abs(out[0] - expected) <= 1e-15


def test_am_zero_dynamics():
    y = np.array([0.7])
    for s in range(1, 4):
        out = am_step(scheme_coeffs("AM", s), y, history([0.0] * s), np.zeros(1), 0.2)
        assert np.array_equal(out, y)


def test_am1_constant_rhs():
    out = am_step(scheme_coeffs("AM", 1), np.array([1.0]), history([3.0]), np.array([3.0]), 0.25)
    assert_allclose(out, [1.75], atol=1e-15)


def test_am2_direct_formula():
    d = 0.1
    f1, f2, f3 = (-math.exp(-k * d) for k in range(3))
    y2 = math.exp(-d)
    expected = y2 + d / 12 * (5 * f3 + 8 * f2 - f1)
    out = am_step(scheme_coeffs("AM", 2), np.array([y2]), history([f1, f2]), np.array([f3]), d)
    assert abs(out[0] - expected) <= 1e-15


def test_steps_on_tensors_match_arrays():
    rng = np.random.default_rng(0)
    fs = [rng.standard_normal((2, 3, 3)) for _ in range(4)]
    y = rng.standard_normal((2, 3, 3))
    h_arr, h_t = RhsHistory(), RhsHistory()
    for k, f in enumerate(fs):
        h_arr.push(k, f)
        h_t.push(k, da.Tensor(f))
    out_arr = ab_step(scheme_coeffs("AB", 4), y, h_arr, 0.2)
    out_t = ab_step(scheme_coeffs("AB", 4), da.Tensor(y), h_t, 0.2)
    assert_allclose(out_t.data, out_arr, atol=1e-15)


# ------------------------------------------------------------ predictor-corrector


def test_pc_heun_factor_example():
    lam, d = -2.0, 0.1
    y, f = pc_step(scheme_coeffs("AB", 1), scheme_coeffs("AM", 1), lambda t, y: lam * y, d,
                   np.array([1.0]), history([lam]), d)
    z = d * lam
    assert_allclose(y, [1 + z + z * z / 2], atol=1e-15)
    assert_allclose(f, [lam * (1 + z)], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(z=st.floats(-0.5, 0.5), d=st.floats(1e-3, 1.0), y0=st.floats(-10, 10))
def test_pc_heun_factor_property(z, d, y0):
    lam = z / d
    y, _ = pc_step(scheme_coeffs("AB", 1), scheme_coeffs("AM", 1), lambda t, y: lam * y, d,
                   np.array([y0]), history([lam * y0]), d)
    assert abs(y[0] - y0 * (1 + z + z * z / 2)) <= 1e-14 * max(1.0, abs(y0))


def test_pc_zero_rhs():
    y, f = pc_step(scheme_coeffs("AB", 2), scheme_coeffs("AM", 2), lambda t, y: np.zeros_like(y), 1.0,
                   np.array([4.0]), history([0.0, 0.0]), 0.5)
    assert np.array_equal(y, [4.0]) and np.array_equal(f, [0.0])


def test_pc_ab3_am3_hand_oracle():
    d = 0.05
    rhs = lambda t, y: -y  # noqa: E731
    # exact start-up at nodes 0, 1, 2
    ys = [math.exp(-k * d) for k in range(3)]
    fs = [-v for v in ys]
    y = ys[-1]
    hist = history(fs)
    y_vec = np.array([y])
    for step in range(3, 10):
        f1, f2, f3 = fs[-3:]
        y_bar = y + d / 12 * (23 * f3 - 16 * f2 + 5 * f1)
        f4 = -y_bar
        y = y + d / 24 * (9 * f4 + 19 * f3 - 5 * f2 + f1)
        fs.append(f4)

        y_vec, f_new = pc_step(scheme_coeffs("AB", 3), scheme_coeffs("AM", 3), rhs, step * d, y_vec, hist, d)
        hist.push(step, f_new)
        assert abs(y_vec[0] - y) <= 1e-14
        assert abs(f_new[0] - f4) <= 1e-14


def test_pc_stores_rhs_at_predicted_state():
    calls = []

    def rhs(t, y):
        calls.append(y.copy())
        return -y

    y_next, f_next = pc_step(scheme_coeffs("AB", 1), scheme_coeffs("AM", 1), rhs, 0.1,
                             np.array([1.0]), history([-1.0]), 0.1)
    assert len(calls) == 1
    assert_allclose(calls[0], [0.9])
    assert_allclose(f_next, [-0.9])
    assert not np.allclose(f_next, -y_next)


# ------------------------------------------------------------ solve_ivp


MODES = [pure_ab(1), pure_ab(2), pure_ab(3), pure_ab(4), pc(1, 1), pc(2, 2), pc(3, 3), pc(4, 3),
         adaptive_bootstrap(), adaptive_bootstrap(2)]


@pytest.mark.parametrize("mode", MODES, ids=lambda m: m.label)
@pytest.mark.parametrize("with_exact", [True, False])
def test_constant_solution(mode, with_exact):
    prob = IvpProblem(lambda t, y: np.zeros_like(y), [1.0], 0.0, 2.0,
                      (lambda t: np.array([1.0])) if with_exact else None)
    traj = solve_ivp(prob, mode, 12)
    assert len(traj) == 13
    assert all(np.array_equal(y, [1.0]) for _, y in traj)
    ts = [t for t, _ in traj]
    assert_allclose(np.diff(ts), 2.0 / 12, atol=1e-15)
    assert ts[-1] == 2.0


def test_ab2_exact_for_linear_rhs():
    prob = IvpProblem(lambda t, y: np.array([t]), [0.0], 0.0, 1.0, lambda t: np.array([t * t / 2]))
    for t, y in solve_ivp(prob, pure_ab(2), 17):
        assert abs(y[0] - t * t / 2) <= 1e-12


def test_pc43_decay_accuracy():
    t, y = solve_ivp(decay(), pc(4, 3), 64)[-1]
    assert t == 1.0
    assert abs(y[0] - math.exp(-1)) < 1e-7


def test_bootstrap_start_without_exact():
    prob = decay()
    prob_noexact = IvpProblem(prob.rhs, prob.y0, prob.t0, prob.t1)
    _, y = solve_ivp(prob_noexact, pc(4, 3), 64)[-1]
    assert abs(y[0] - math.exp(-1)) < 1e-5


def test_too_few_steps():
    with pytest.raises(ConfigurationError):
        solve_ivp(decay(), pure_ab(4), 3)
    solve_ivp(decay(), pure_ab(4), 4)


def test_problem_rejects_empty_interval():
    with pytest.raises(ConfigurationError):
        IvpProblem(lambda t, y: y, [1.0], 1.0, 1.0)


@pytest.mark.parametrize("s", [1, 2, 3, 4])
def test_ab_polynomial_exactness(s):
    for k in range(s):
        prob = IvpProblem(lambda t, y, k=k: np.array([(k + 1) * t ** k]), [1.0], 0.0, 1.0,
                          lambda t, k=k: np.array([1.0 + t ** (k + 1)]))
        assert final_error(prob, pure_ab(s), 16) <= 1e-12


@pytest.mark.parametrize("s", [1, 2, 3])
def test_am_polynomial_exactness(s):
    for k in range(s + 1):
        prob = IvpProblem(lambda t, y, k=k: np.array([(k + 1) * t ** k]), [1.0], 0.0, 1.0,
                          lambda t, k=k: np.array([1.0 + t ** (k + 1)]))
        assert final_error(prob, pc(s, s), 16) <= 1e-12


def test_ab_not_exact_beyond_degree():
    prob = IvpProblem(lambda t, y: np.array([2 * t]), [1.0], 0.0, 1.0, lambda t: np.array([1.0 + t * t]))
    assert final_error(prob, pure_ab(1), 16) > 1e-3


# ------------------------------------------------------------ orders


def test_ab1_order():
    assert 0.75 <= empirical_order(decay(), pure_ab(1), 64) <= 1.25


def test_am3_order():
    assert 3.75 <= empirical_order(decay(), pc(3, 3), 64) <= 4.25


@pytest.mark.parametrize("mode", [pure_ab(1), pure_ab(4), pc(2, 2), pc(4, 3)], ids=lambda m: m.label)
def test_constant_rhs_gives_infinite_order(mode):
    prob = IvpProblem(lambda t, y: np.array([2.0]), [1.0], 0.0, 1.0, lambda t: np.array([1.0 + 2.0 * t]))
    assert empirical_order(prob, mode, 16) == math.inf


@pytest.mark.parametrize("family,s", [("AB", 1), ("AB", 2), ("AB", 3), ("AB", 4), ("AM", 1), ("AM", 2), ("AM", 3)])
def test_all_order_slopes(family, s):
    mode = pure_ab(s) if family == "AB" else pc(s, s)
    nominal = scheme_coeffs(family, s).order
    assert abs(empirical_order(decay(), mode, 64) - nominal) <= 0.25


def test_empirical_order_preconditions():
    prob = decay()
    with pytest.raises(ConfigurationError):
        empirical_order(prob, pure_ab(1), 4)
    with pytest.raises(ConfigurationError):
        empirical_order(IvpProblem(prob.rhs, prob.y0, 0.0, 1.0), pure_ab(1), 64)


def test_order_rows_csv():
    rows = order_rows(decay(), pure_ab(2), [16, 32], "AB2", 2)
    assert ORDER_CSV_HEADER == "scheme,steps,nominal_order,delta,max_error,empirical_order"
    first, second = (r.csv().split(",") for r in rows)
    assert first[:3] == ["AB2", "16", "2"] and first[-1] == ""
    assert float(first[3]) == 1 / 16
    assert abs(float(second[-1]) - 2.0) < 0.1
