"""Finite-difference gradient verification.

``grad_check`` compares reverse-mode gradients against central finite
differences, the independent oracle used throughout the test suite.  The
named check suite covers every registered op, the adapter block, the
training loss, and a tiny end-to-end model; ``corrupted_op`` deliberately
breaks one backward rule so the suite's failure path can be exercised.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    per_input: list = field(default_factory=list)
    eps: float = 1e-5
    tol: float = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_err: float


def finite_difference(f, inputs, eps=1e-5):
    """Central-difference gradients of a scalar function, one input at a time."""
    grads = []
    for inp in inputs:
        flat = inp.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(*inputs).item()
            flat[i] = orig - eps
            down = f(*inputs).item()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * eps)
        grads.append(g.reshape(inp.data.shape))
    return grads


def grad_check(f, inputs, eps=1e-5, tol=1e-6):
    """Compare analytic gradients of a scalar-valued f against central differences.

    Relative error per element is |a - n| / max(1, |a|, |n|); the check
    passes iff the max over all inputs is below tol.
    """
    for inp in inputs:
        inp.requires_grad = True
        inp.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check: f must be scalar-valued, got shape {out.data.shape}")
    out.backward()
    analytic = [
        inp.grad if inp.grad is not None else np.zeros_like(inp.data) for inp in inputs
    ]
    numeric = finite_difference(f, inputs, eps=eps)
    per_input = []
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        per_input.append(float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    worst = max(per_input) if per_input else 0.0
    return GradCheckReport(passed=worst < tol, max_rel_err=worst, per_input=per_input, eps=eps, tol=tol)


@contextmanager
def corrupted_op(name, scale=1.5):
    """Temporarily scale the gradient flowing out of one op's backward rule.

    Used by tests and the CLI fault-injection mode to prove the
    finite-difference oracle catches a broken rule.
    """
    original = getattr(T, name)

    def bad(*args, **kwargs):
        out = original(*args, **kwargs)
        inner = out._backward
        if inner is not None:
            def corrupted(g):
                inner(g * scale)
            out._backward = corrupted
        return out

    setattr(T, name, bad)
    try:
        yield
    finally:
        setattr(T, name, original)


# -- the named suite ----------------------------------------------------------


def _rand(rng, *shape):
    return T.Tensor(rng.standard_normal(shape))


def _op_checks(rng):
    """Scalar-wrapped probes for every registered op, on rank <= 4 inputs."""
    a34 = _rand(rng, 3, 4)
    b45 = _rand(rng, 4, 5)
    a234 = _rand(rng, 2, 3, 4)
    x234 = _rand(rng, 2, 3, 4)
    y14 = _rand(rng, 1, 4)
    x2324 = _rand(rng, 2, 3, 2, 4)
    pos = T.Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    ids = rng.integers(0, 6, (2, 3))
    table = _rand(rng, 6, 4)

    return [
        ("matmul", lambda a, b: T.sum_(T.matmul(a, b)), [a34, b45]),
        ("matmul_batched", lambda a, b: T.sum_(T.matmul(a, b)), [a234, _rand(rng, 4, 5)]),
        ("add", lambda a, b: T.sum_(T.mul(T.add(a, b), a)), [x234, y14]),
        ("sub", lambda a, b: T.sum_(T.mul(T.sub(a, b), b)), [x234, y14]),
        ("mul", lambda a, b: T.sum_(T.mul(a, b)), [x234, y14]),
        ("div", lambda a, b: T.sum_(T.div(a, b)), [a34, pos]),
        ("neg", lambda a: T.sum_(T.mul(T.neg(a), a)), [a34]),
        ("power", lambda a: T.sum_(T.power(a, 3.0)), [a34]),
        ("gelu", lambda a: T.sum_(T.gelu(a)), [x234]),
        ("sigmoid", lambda a: T.sum_(T.mul(T.sigmoid(a), a)), [x234]),
        # keep relu probes away from the kink, where the subgradient is ambiguous
        ("relu", lambda a: T.sum_(T.relu(a)), [T.Tensor(rng.uniform(0.2, 1.5, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)))]),
        ("softplus", lambda a: T.sum_(T.mul(T.softplus(a), a)), [x234]),
        ("layer_norm", lambda a: T.sum_(T.mul(T.layer_norm(a), a)), [x2324]),
        ("softmax", lambda a: T.sum_(T.mul(T.softmax(a, axis=-1), a)), [x2324]),
        ("mean", lambda a: T.sum_(T.mul(T.mean(a, axis=1, keepdims=True), a)), [a234]),
        ("sum", lambda a: T.sum_(T.mul(T.sum_(a, axis=-1, keepdims=True), a)), [a234]),
        ("reshape", lambda a: T.sum_(T.mul(T.reshape(a, (4, 6)), T.reshape(a, (4, 6)))), [x234]),
        ("transpose", lambda a: T.sum_(T.mul(T.transpose(a, (1, 0, 2)), T.transpose(a, (1, 0, 2)))), [a234]),
        ("broadcast_to", lambda a: T.sum_(T.mul(T.broadcast_to(a, (3, 3, 4)), T.broadcast_to(a, (3, 3, 4)))), [a34]),
        ("concat", lambda a, b: T.sum_(T.mul(T.concat([a, b], axis=1), T.concat([a, b], axis=1))), [a34, _rand(rng, 3, 2)]),
        ("embedding_lookup", lambda t: T.sum_(T.mul(T.embedding_lookup(t, ids), T.embedding_lookup(t, ids))), [table]),
        ("getitem", lambda a: T.sum_(T.mul(T.getitem(a, (slice(None), slice(1, 3))), T.getitem(a, (slice(None), slice(1, 3))))), [a34]),
    ]


def _adapter_check(rng):
    from .adapters import AdapterBlock

    block = AdapterBlock("probe", d=8, d_prime=2, rng=rng)
    # a zero up-projection hides W1/b1 from the gradient; use a live one
    block.w2.tensor.data = rng.standard_normal(block.w2.tensor.shape) * 0.3
    block.b2.tensor.data = rng.standard_normal(block.b2.tensor.shape) * 0.1
    x = _rand(rng, 3, 8)
    params = [p.tensor for p in block.params()]

    def f(xt, w1, b1, w2, b2):
        y = block(xt)
        return T.sum_(T.mul(y, y))

    return ("adapter_block", f, [x] + params)


def _loss_check(rng):
    from .train import segmentation_loss

    logits = T.Tensor(rng.standard_normal((8, 8)))
    mask = (rng.uniform(size=(8, 8)) > 0.5).astype(np.float64)

    def f(lg):
        return segmentation_loss(lg, mask, lambda_d=1.5, lambda_ce=1.0)

    return ("loss", f, [logits])


def _end_to_end_check(rng, tiny=False):
    from .adapters import AdapterPlan, attach
    from .model import ModelConfig, VLSMModel
    from .train import segmentation_loss

    size = 8 if tiny else 16
    cfg = ModelConfig(
        image_size=size, patch_size=8, d_v=12, d_t=8,
        n_layers_v=3, n_layers_t=3, n_heads=2, proj_dim=8,
        extract_layers=(1, 2, 3), vocab_size=16, max_text_len=8, decoder_dim=8,
    )
    model = VLSMModel(cfg, seed=7)
    plan = AdapterPlan(variant="VLC", kind="dense", d_prime=2)
    adapted = attach(plan, model, seed=11)
    for p in adapted.trainable_parameters():
        if p.name.endswith((".w2", ".b2")):
            p.tensor.data = rng.standard_normal(p.tensor.shape) * 0.2
    image = rng.uniform(0.0, 1.0, (size, size, 3))
    ids = [1, 5, 9, 2]
    mask = (rng.uniform(size=(size, size)) > 0.5).astype(np.float64)
    tensors = [p.tensor for p in adapted.trainable_parameters()]

    def f(*params):
        logits = adapted.forward(image, ids)
        return segmentation_loss(logits, mask, lambda_d=1.5, lambda_ce=1.0)

    return ("end_to_end", f, tensors)


def run_suite(seed=0, tiny=False, tol_ops=1e-6, tol_e2e=1e-5, eps=1e-5):
    """Run every named gradient check; returns a list of CheckResult."""
    results = []
    rng = np.random.default_rng(seed)
    for name, f, inputs in _op_checks(rng):
        report = grad_check(f, inputs, eps=eps, tol=tol_ops)
        results.append(CheckResult(name, report.passed, report.max_rel_err))
    for name, f, inputs in (_adapter_check(rng), _loss_check(rng)):
        report = grad_check(f, inputs, eps=eps, tol=tol_ops)
        results.append(CheckResult(name, report.passed, report.max_rel_err))
    name, f, inputs = _end_to_end_check(rng, tiny=tiny)
    report = grad_check(f, inputs, eps=eps, tol=tol_e2e)
    results.append(CheckResult(name, report.passed, report.max_rel_err))
    return results
