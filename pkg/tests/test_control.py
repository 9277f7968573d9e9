import numpy as np
import pytest
import torch

from sketchanim.control import (
    ConditionBundle,
    ConditionExperts,
    ConditionGate,
    ConditionWeights,
    ConditionWeightStore,
    set_weights,
)
from sketchanim.encoders import MODALITY_BACKGROUND, MODALITY_INSTANCE, MODALITY_TEXT, ProjectedFeature


def make_bundle(rng, width=32, n_instances=2, weights=(1.0, 1.0, None)):
    bg_w, text_w, inst_w = weights
    inst_w = inst_w if inst_w is not None else [1.0] * n_instances
    feat = lambda k, m: ProjectedFeature(
        torch.tensor(rng.normal(size=(k, width)), dtype=torch.float32), m
    )
    return ConditionBundle(
        bg=feat(4, MODALITY_BACKGROUND),
        text=feat(3, MODALITY_TEXT),
        instances=[feat(5, MODALITY_INSTANCE) for _ in range(n_instances)],
        weights=ConditionWeights(
            bg=torch.tensor(float(bg_w)),
            text=torch.tensor(float(text_w)),
            instances=[torch.tensor(float(w)) for w in inst_w],
        ),
    )


@pytest.fixture()
def experts():
    torch.manual_seed(0)
    return ConditionExperts(32, heads=4)


def test_all_zero_weights_give_exact_zero(experts):
    rng = np.random.default_rng(0)
    bundle = make_bundle(rng, weights=(0.0, 0.0, [0.0, 0.0]))
    hidden = torch.tensor(rng.normal(size=(6, 32)), dtype=torch.float32)
    out = experts(hidden, bundle)
    assert torch.all(out == 0)


def test_text_only_weighting_selects_text_branch(experts):
    rng = np.random.default_rng(1)
    bundle = make_bundle(rng, weights=(0.0, 1.0, [0.0, 0.0]))
    hidden = torch.tensor(rng.normal(size=(6, 32)), dtype=torch.float32)
    out = experts(hidden, bundle)
    text_alone = experts.text_branch(hidden, bundle.text.tokens)
    assert torch.allclose(out, text_alone, atol=0)


def test_linearity_in_weight_vector(experts):
    rng = np.random.default_rng(2)
    hidden = torch.tensor(rng.normal(size=(6, 32)), dtype=torch.float32)
    base = make_bundle(rng, weights=(0.7, 0.3, [1.2, 0.5]))
    doubled = set_weights(base, {"bg": 1.4, "text": 0.6, "inst": {0: 2.4, 1: 1.0}})
    out1 = experts(hidden, base)
    out2 = experts(hidden, doubled)
    assert torch.allclose(out2, 2 * out1, atol=1e-6)


def test_zero_weight_decouples_condition_gradient(experts):
    rng = np.random.default_rng(3)
    hidden = torch.tensor(rng.normal(size=(6, 32)), dtype=torch.float32)
    bundle = make_bundle(rng, weights=(1.0, 0.0, [1.0, 1.0]))
    # finite difference: vary the text tokens, output must not move
    out_a = experts(hidden, bundle)
    bundle.text.tokens += 10.0
    out_b = experts(hidden, bundle)
    assert torch.max(torch.abs(out_a - out_b)).item() == 0.0
    # autograd agrees
    tokens = bundle.text.tokens.clone().requires_grad_(True)
    bundle.text.tokens = tokens
    experts(hidden, bundle).sum().backward()
    assert tokens.grad is None or torch.all(tokens.grad == 0)


def test_width_mismatch_rejected(experts):
    rng = np.random.default_rng(4)
    bundle = make_bundle(rng, width=16)
    hidden = torch.zeros(4, 32)
    with pytest.raises(ValueError, match="width"):
        experts(hidden, bundle)


class TestGate:
    def test_zero_init_identity(self):
        gate = ConditionGate()
        h = torch.randn(5, 8)
        h_attn = torch.randn(5, 8)
        assert torch.equal(gate(h, h_attn), h)

    def test_saturation(self):
        gate = ConditionGate()
        with torch.no_grad():
            gate.gain.fill_(30.0)
        h = torch.randn(5, 8)
        h_attn = torch.randn(5, 8)
        assert torch.allclose(gate(h, h_attn), h + h_attn, atol=1e-6)

    def test_gate_derivative_matches_finite_difference(self):
        torch.manual_seed(5)
        gate = ConditionGate().double()
        with torch.no_grad():
            gate.gain.fill_(0.37)
        h = torch.randn(4, 6, dtype=torch.float64)
        h_attn = torch.randn(4, 6, dtype=torch.float64)
        eps = 1e-5
        with torch.no_grad():
            gate.gain += eps
            plus = gate(h, h_attn)
            gate.gain -= 2 * eps
            minus = gate(h, h_attn)
            gate.gain += eps
        fd = (plus - minus) / (2 * eps)
        g = gate.gain.detach()
        analytic = (1 - torch.tanh(g) ** 2) * h_attn
        rel = torch.abs(fd - analytic) / torch.clamp(torch.abs(analytic), min=1e-8)
        assert rel.max().item() < 1e-4

    def test_shape_mismatch_rejected(self):
        gate = ConditionGate()
        with pytest.raises(ValueError, match="shapes differ"):
            gate(torch.zeros(3, 4), torch.zeros(4, 3))


class TestSetWeights:
    def test_text_zero_override_makes_output_text_independent(self):
        torch.manual_seed(6)
        experts = ConditionExperts(32, heads=4)
        rng = np.random.default_rng(6)
        hidden = torch.tensor(rng.normal(size=(4, 32)), dtype=torch.float32)
        bundle = make_bundle(rng)
        muted = set_weights(bundle, {"text": 0})
        out_a = experts(hidden, muted)
        muted.text.tokens = muted.text.tokens + 42.0
        out_b = experts(hidden, muted)
        assert torch.max(torch.abs(out_a - out_b)).item() == 0.0

    def test_empty_override_is_identity(self):
        rng = np.random.default_rng(7)
        bundle = make_bundle(rng)
        same = set_weights(bundle, {})
        assert float(same.weights.bg) == float(bundle.weights.bg)
        assert float(same.weights.text) == float(bundle.weights.text)
        assert [float(w) for w in same.weights.instances] == [
            float(w) for w in bundle.weights.instances
        ]

    def test_partial_instance_update(self):
        rng = np.random.default_rng(8)
        bundle = make_bundle(rng, weights=(1.0, 1.0, [1.0, 1.0]))
        updated = set_weights(bundle, {"inst": {1: 0.5}})
        assert float(updated.weights.instances[0]) == 1.0
        assert float(updated.weights.instances[1]) == 0.5
        assert float(bundle.weights.instances[1]) == 1.0  # original untouched

    def test_negative_value_rejected(self):
        rng = np.random.default_rng(9)
        bundle = make_bundle(rng)
        with pytest.raises(ValueError, match=">= 0"):
            set_weights(bundle, {"bg": -0.1})
        with pytest.raises(ValueError, match=">= 0"):
            set_weights(bundle, {"inst": {0: -1}})

    def test_bg_override_allowed_at_inference(self):
        rng = np.random.default_rng(10)
        bundle = make_bundle(rng)
        overridden = set_weights(bundle, {"bg": 2.5})
        assert float(overridden.weights.bg) == 2.5


class TestWeightStore:
    def test_bg_excluded_from_trainable_parameters(self):
        store = ConditionWeightStore(max_instances=4)
        trainable = [p for p in store.parameters() if p.requires_grad]
        assert store.bg_weight.requires_grad is False
        assert len(trainable) == 2

    def test_bundle_weights_slice_and_extend(self):
        store = ConditionWeightStore(max_instances=2)
        w = store.bundle_weights(4)
        assert len(w.instances) == 4
        assert w.instances[0] is not None
        assert float(w.instances[3]) == 1.0  # beyond the store: constant

    def test_clamp_non_negative(self):
        store = ConditionWeightStore(max_instances=2)
        with torch.no_grad():
            store.text_weight.fill_(-0.5)
            store.instance_weights.fill_(-1.0)
        store.clamp_non_negative()
        assert store.text_weight.item() == 0.0
        assert torch.all(store.instance_weights == 0.0)
