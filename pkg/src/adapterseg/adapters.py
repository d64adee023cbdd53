"""Residual bottleneck adapters and their placement machinery.

An AdapterBlock computes ``f + sigma(psi(f @ W1 + b1) @ W2 + b2)`` with a
bottleneck width d' <= d, so its output can replace f anywhere in the
frozen network without changing shapes.  Both activations default to
GELU: GELU(0) = 0, so the zero-initialized up-projection makes every
block an exact identity at step 0.

Placement is declarative (AdapterPlan): the shallow kind wraps the
activations tapped for the decoder, the dense kind wraps every
attention/MLP output before its residual addition up to the deepest
tapped layer, and an optional extra block adapts the text conditioning
embedding.  ``count_trainable`` predicts the trainable-parameter total in
closed form; it must always agree with the live census.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .model import ParamSet, freeze_backbone, trunc_normal
from .tensor import Parameter

VARIANTS = ("V", "VL", "VLC")
KINDS = ("shallow", "dense")

ACTIVATIONS = {"gelu": lambda x: T.gelu(x), "relu": lambda x: T.relu(x),
               "sigmoid": lambda x: T.sigmoid(x)}


class AdapterBlock:
    """Trainable bottleneck with a residual path; identity at init."""

    def __init__(self, name, d, d_prime, rng=None, psi="gelu", sigma="gelu", dtype=np.float64):
        if d_prime > d:
            raise ConfigError(f"d_prime: bottleneck width {d_prime} exceeds input width {d}")
        if psi not in ACTIVATIONS or sigma not in ACTIVATIONS:
            raise ConfigError(f"activation: unknown psi/sigma {psi!r}/{sigma!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.name = name
        self.d = d
        self.d_prime = d_prime
        self.psi = psi
        self.sigma = sigma
        self.w1 = Parameter(f"{name}.w1", trunc_normal(rng, (d, d_prime), std=1e-3), dtype=dtype)
        self.b1 = Parameter(f"{name}.b1", np.zeros(d_prime), dtype=dtype)
        self.w2 = Parameter(f"{name}.w2", np.zeros((d_prime, d)), dtype=dtype)
        self.b2 = Parameter(f"{name}.b2", np.zeros(d), dtype=dtype)

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def n_params(self):
        return 2 * self.d * self.d_prime + self.d_prime + self.d

    def branch(self, f):
        """The bottleneck path alone, without the residual addition."""
        if f.shape[-1] != self.d:
            raise DimensionError(
                f"{self.name}: input width {f.shape[-1]} does not match adapter width {self.d}"
            )
        vec = f.ndim == 1
        if vec:
            f = T.reshape(f, (1, f.shape[0]))
        h = ACTIVATIONS[self.psi](T.add(T.matmul(f, self.w1.tensor), self.b1.tensor))
        out = ACTIVATIONS[self.sigma](T.add(T.matmul(h, self.w2.tensor), self.b2.tensor))
        if vec:
            out = T.reshape(out, (out.shape[-1],))
        return out

    def __call__(self, f):
        return T.add(f, self.branch(f))


def adapter_forward(block, f):
    return block(f)


@dataclass
class AdapterPlan:
    """Where adapters attach: variant x kind x layers x bottleneck width."""

    variant: str
    kind: str
    d_prime: int
    shallow_layers: tuple | None = None   # None: use the model's tapped layers
    dense_max_layer: int | None = None    # None: use the deepest tapped layer
    include_conditioning: bool = False

    def __post_init__(self):
        self.variant = str(self.variant).upper()
        self.kind = str(self.kind).lower()
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: expected one of {VARIANTS}, got {self.variant!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"kind: expected one of {KINDS}, got {self.kind!r}")
        if self.d_prime < 1:
            raise ConfigError(f"d_prime: must be >= 1, got {self.d_prime}")
        if self.shallow_layers is not None:
            self.shallow_layers = tuple(int(l) for l in self.shallow_layers)
        if self.variant == "VLC":
            self.include_conditioning = True

    @property
    def adapts_text(self):
        return self.variant in ("VL", "VLC")

    def resolved_shallow_layers(self, cfg):
        return self.shallow_layers if self.shallow_layers is not None else cfg.extract_layers

    def resolved_max_layer(self, cfg):
        return self.dense_max_layer if self.dense_max_layer is not None else max(cfg.extract_layers)

    def to_dict(self):
        d = asdict(self)
        if d["shallow_layers"] is not None:
            d["shallow_layers"] = list(d["shallow_layers"])
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"adapter: unknown fields {sorted(extra)}")
        return cls(**d)


def plan_sites(plan, cfg):
    """Enumerate (site_path, width) for every block the plan creates.

    Raises ConfigError naming the offending index when the plan does not
    fit the model configuration.
    """
    sites = []
    if plan.kind == "shallow":
        layers = plan.resolved_shallow_layers(cfg)
        for l in layers:
            if l not in cfg.extract_layers:
                raise ConfigError(
                    f"shallow_layers: layer {l} is not a tapped layer {cfg.extract_layers}"
                )
        sites += [(f"image.skip.{l}", cfg.d_v) for l in layers]
        if plan.adapts_text:
            sites += [(f"text.skip.{l}", cfg.d_t) for l in layers]
    else:
        top = plan.resolved_max_layer(cfg)
        if top < 1 or top > cfg.n_layers_v:
            raise ConfigError(f"dense_max_layer: {top} outside 1..{cfg.n_layers_v} (image encoder)")
        if plan.adapts_text and top > cfg.n_layers_t:
            raise ConfigError(f"dense_max_layer: {top} outside 1..{cfg.n_layers_t} (text encoder)")
        for l in range(1, top + 1):
            sites += [(f"image.msa.{l}", cfg.d_v), (f"image.mlp.{l}", cfg.d_v)]
        if plan.adapts_text:
            for l in range(1, top + 1):
                sites += [(f"text.msa.{l}", cfg.d_t), (f"text.mlp.{l}", cfg.d_t)]
    if plan.include_conditioning:
        sites.append(("cond", cfg.proj_dim))
    for path, width in sites:
        if plan.d_prime > width:
            raise ConfigError(
                f"d_prime: {plan.d_prime} exceeds width {width} at site {path}"
            )
    return sites


def count_trainable(plan, cfg):
    """Closed-form trainable-parameter total: sum over sites of 2*d*d' + d' + d."""
    dp = plan.d_prime
    return sum(2 * d * dp + dp + d for _, d in plan_sites(plan, cfg))


def count_breakdown(plan, cfg):
    dp = plan.d_prime
    return [(path, d, 2 * d * dp + dp + d) for path, d in plan_sites(plan, cfg)]


class AdaptedModel:
    """A frozen backbone plus the trainable adapter blocks of one plan."""

    def __init__(self, model, plan, seed=0, dtype=None):
        self.model = model
        self.plan = plan
        self.cfg = model.cfg
        dtype = dtype or model.dtype
        sites = plan_sites(plan, model.cfg)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.adapter_params = ParamSet()
        self.blocks = {}
        for path, width in sites:
            block = AdapterBlock(f"adapters.{path}", width, plan.d_prime, rng=rng, dtype=dtype)
            for p in block.params():
                self.adapter_params.register(p)
            self.blocks[path] = block
        freeze_backbone(model)

    # -- placement lookups ----------------------------------------------------

    def _dense_hooks(self, encoder):
        hooks = {}
        for path, block in self.blocks.items():
            parts = path.split(".")
            if parts[0] == encoder and parts[1] in ("msa", "mlp"):
                hooks[(parts[1], int(parts[2]))] = block
        return hooks or None

    def _skip_blocks(self, encoder):
        out = {}
        for path, block in self.blocks.items():
            parts = path.split(".")
            if parts[0] == encoder and parts[1] == "skip":
                out[int(parts[2])] = block
        return out

    @property
    def cond_block(self):
        return self.blocks.get("cond")

    # -- forward ---------------------------------------------------------------

    def forward(self, v, ids):
        trace = self.model.encode_image(v, adapters=self._dense_hooks("image"))
        for layer, block in self._skip_blocks("image").items():
            trace.extracted[layer] = block(trace.extracted[layer])

        text_trace, cond = self.model.encode_text(ids, adapters=self._dense_hooks("text"))
        text_skips = self._skip_blocks("text")
        if text_skips:
            _, eos, batched = self.model._prepare_text(ids)
            # New skip paths into the conditioning embedding: each carries the
            # adapter's bottleneck output at the pooled position, so the
            # contribution is exactly zero at init and the frozen model's
            # behaviour is unchanged until training moves the adapters.
            raw = dict(text_trace.extracted)
            pooled = self.model.pool_text(text_trace, eos_positions=eos, batched=batched)
            for layer, block in sorted(text_skips.items()):
                text_trace.extracted[layer] = block(raw[layer])
                if batched:
                    rows = np.arange(raw[layer].shape[0])
                    eos_slice = raw[layer][(rows, np.asarray(eos))]
                else:
                    eos_slice = raw[layer][int(eos)]
                pooled = T.add(pooled, block.branch(eos_slice))
            cond = self.model.project_text(pooled)
        if self.cond_block is not None:
            cond = self.cond_block(cond)
        return self.model.decode(trace, cond)

    # -- parameter management ----------------------------------------------------

    def parameters(self):
        return self.model.parameters() + self.adapter_params.parameters()

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def frozen_parameters(self):
        return [p for p in self.parameters() if not p.trainable]

    def n_trainable(self):
        return sum(p.size for p in self.trainable_parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self):
        return {p.name: p.data for p in self.parameters()}


def attach(plan, model, seed=0):
    """Build the plan's adapter blocks around a model and freeze the backbone."""
    return AdaptedModel(model, plan, seed=seed)
