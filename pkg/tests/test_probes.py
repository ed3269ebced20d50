import numpy as np
import pytest

from onionlab.core.gradcheck import max_relative_error
from onionlab.core.rng import make_rng
from onionlab.gru import GruParams
from onionlab.interventions.onion import OnionParams, onion_intervene
from onionlab.probes import (PROBE_KINDS, ProbeParams, defeaturize, featurize, init_probe, onion_interchange,
                             onion_probe_decode, probe_accuracy, probe_loss, reconstruction_error)
from onionlab.taskgen import OnionEditExample, TaskConfig

TASK = TaskConfig(n_symbols=4, l_max=3)


def hand_onion_probe(n=4, ns=4) -> ProbeParams:
    arrays = {"E": np.eye(ns, n, dtype=np.float32), "g": np.full(n, 2.5, np.float32),
              "gamma": np.full(n, 0.4, np.float32), "beta": np.zeros(n, np.float32), "b": np.zeros(n, np.float32),
              "W1": np.eye(n, dtype=np.float32), "b1": np.zeros(n, np.float32),
              "W2": np.eye(n, ns, dtype=np.float32), "b2": np.zeros(ns, np.float32)}
    return ProbeParams("onion", arrays, ns, 3)


def hand_op(probe: ProbeParams) -> OnionParams:
    a = probe.arrays
    return OnionParams(a["E"].copy(), a["g"].copy(), a["gamma"].copy(), a["beta"].copy(), a["b"].copy())


def test_hand_built_onion_probe_decodes():
    probe = hand_onion_probe()
    E = probe.arrays["E"]
    for a, b in [(0, 1), (2, 3), (3, 0)]:
        assert onion_probe_decode(probe, E[a] + 0.4 * E[b], 2) == [a, b]
        assert onion_probe_decode(probe, E[a] + 0.4 * E[b], 1) == [a]
    with pytest.raises(ValueError):
        onion_probe_decode(probe, E[0], 0)


def test_flat_probe_output_size():
    from onionlab.probes import _flat_logits
    from onionlab.core import Tensor

    for kind in ("linear", "mlp"):
        p = init_probe(kind, 8, TASK, make_rng(0))
        P = {k: Tensor(v) for k, v in p.arrays.items()}
        out = _flat_logits(kind, P, Tensor(np.zeros((5, 8), np.float32)), TASK.n_symbols)
        assert out.shape == (5 * TASK.l_max, TASK.n_symbols)


@pytest.mark.parametrize("kind", PROBE_KINDS)
def test_probe_loss_gradient_f64(kind):
    rng = make_rng(1)
    p = init_probe(kind, 5, TASK, rng, np.float64)
    h = rng.uniform(-1, 1, (3, 5))
    tokens = np.array([[0, 1, 2], [3, 3, 0], [1, 2, 0]])
    lengths = np.array([3, 2, 1])
    err = max_relative_error(lambda P: probe_loss(P, kind, h, tokens, lengths, 4, 3), p.arrays)
    assert err < 1e-4


def test_positions_beyond_length_ignored():
    rng = make_rng(2)
    p = init_probe("linear", 5, TASK, rng, np.float64)
    h = rng.uniform(-1, 1, (2, 5))
    lengths = np.array([1, 2])
    from onionlab.core import Tensor
    P = {k: Tensor(v) for k, v in p.arrays.items()}
    a = probe_loss(P, "linear", h, np.array([[0, 1, 2], [1, 2, 3]]), lengths, 4, 3)
    b = probe_loss(P, "linear", h, np.array([[0, 3, 3], [1, 2, 0]]), lengths, 4, 3)
    assert float(a.data) == float(b.data)


def test_probe_accuracy_fields():
    probe = hand_onion_probe()
    E = probe.arrays["E"]
    h = np.stack([E[0] + 0.4 * E[1], E[2] + 0.4 * E[2]])
    acc = probe_accuracy(probe, h, np.array([[0, 1, 0], [2, 0, 0]]), np.array([2, 2]))
    assert acc == {"sequence": 0.5, "token": 0.75}


def test_gru_probe_predictions_shape():
    p = init_probe("gru-noinput", 6, TASK, make_rng(0))
    from onionlab.probes import probe_predict
    assert probe_predict(p, np.zeros((4, 6), np.float32), np.array([1, 3, 2, 3])).shape == (4, 3)


# -- featurizer ---------------------------------------------------------------------

def test_featurizer_single_position_edge_case():
    probe = hand_onion_probe()
    op = hand_op(probe)
    h = np.array([0.3, -0.2, 0.9, 0.1], np.float32)
    lit = featurize(h, probe, op, 1, variant="literal")
    np.testing.assert_array_equal(lit.residual, h)  # empty subtraction
    s1 = lit.scales[0]
    np.testing.assert_allclose(defeaturize(lit), h + lit.features[0] * s1, atol=1e-7)
    con = featurize(h, probe, op, 1)
    np.testing.assert_allclose(defeaturize(con), h, atol=1e-6)


def test_featurizer_inverse_on_synthetic_state():
    probe = hand_onion_probe()
    op = hand_op(probe)
    E = probe.arrays["E"]
    h = E[1] * 1.0 + E[3] * 0.4 + E[0] * 0.16
    f = featurize(h, probe, op, 3)
    assert f.tokens == (1, 3, 0)
    assert np.abs(defeaturize(f) - h).max() < 1e-6
    assert reconstruction_error(h, f) < 1e-6
    with pytest.raises(ValueError):
        featurize(h, probe, op, 3, variant="other")


@pytest.mark.parametrize("seed", range(20))
def test_dual_route_interchange_random(seed):
    rng = make_rng(seed)
    probe = init_probe("onion", 8, TaskConfig(), rng)
    op = OnionParams.init(30, 8, rng)
    op.gamma[:] = rng.uniform(0.2, 0.9, 8)
    op.beta[:] = rng.normal(0, 0.2, 8)
    h = rng.uniform(-1, 1, 8).astype(np.float32)
    L = int(rng.integers(1, 10))
    a_tokens = onion_probe_decode(probe, h, L)
    j = int(rng.integers(1, L + 1))
    b_tokens = list(a_tokens)
    b_tokens[j - 1] = int(rng.integers(30))
    route_f = onion_interchange(op, probe, h, b_tokens, j, L)
    route_d = onion_intervene(op, h, OnionEditExample(tuple(a_tokens), j, a_tokens[j - 1], b_tokens[j - 1]))
    assert np.abs(route_f - route_d).max() < 1e-5


def test_interchange_same_token_returns_state():
    probe = hand_onion_probe()
    op = hand_op(probe)
    E = probe.arrays["E"]
    h = E[2] + 0.4 * E[1]
    out = onion_interchange(op, probe, h, [2, 1], 1, 2)
    np.testing.assert_allclose(out, h, atol=1e-7)
