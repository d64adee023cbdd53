"""A small frozen dual-encoder segmentation backbone.

Image and text transformer encoders share a joint embedding space; a
reduced-width decoder consumes activations tapped from a fixed set of
encoder layers and is conditioned on the pooled text embedding through a
per-channel scale/shift (FiLM).  The structure exposes exactly the hook
points adapter fine-tuning needs: per-block attention/MLP outputs, the
tapped activations, and the conditioning vector.

Backbone weights are randomly initialized (truncated normal, std 0.02);
nothing pretrained is loaded.  Construction and forward passes are
deterministic for a fixed seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Parameter, Tensor

log = logging.getLogger("adapterseg")


def trunc_normal(rng, shape, std=0.02):
    """Normal samples with |x| > 2 sigma redrawn, then scaled by std."""
    out = rng.standard_normal(shape)
    while True:
        bad = np.abs(out) > 2.0
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum()))
    return out * std


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    d_v: int = 128
    d_t: int = 64
    n_layers_v: int = 9
    n_layers_t: int = 9
    n_heads: int = 4
    proj_dim: int = 64
    extract_layers: tuple = (3, 6, 9)
    vocab_size: int = 64
    max_text_len: int = 32
    decoder_dim: int = 32

    def __post_init__(self):
        self.extract_layers = tuple(int(l) for l in self.extract_layers)
        for name in ("image_size", "patch_size", "d_v", "d_t", "n_layers_v", "n_layers_t",
                     "n_heads", "proj_dim", "vocab_size", "max_text_len", "decoder_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"patch_size: {self.patch_size} does not divide image_size {self.image_size}"
            )
        if list(self.extract_layers) != sorted(set(self.extract_layers)) or not self.extract_layers:
            raise ConfigError(f"extract_layers: must be strictly increasing, got {self.extract_layers}")
        if self.extract_layers[0] < 1:
            raise ConfigError(f"extract_layers: indices are 1-based, got {self.extract_layers}")
        if self.extract_layers[-1] > self.n_layers_v:
            raise ConfigError(
                f"extract_layers: max index {self.extract_layers[-1]} exceeds n_layers_v {self.n_layers_v}"
            )
        if self.extract_layers[-1] > self.n_layers_t:
            raise ConfigError(
                f"extract_layers: max index {self.extract_layers[-1]} exceeds n_layers_t {self.n_layers_t}"
            )
        for name in ("d_v", "d_t", "decoder_dim"):
            if getattr(self, name) % self.n_heads != 0:
                raise ConfigError(f"{name}: {getattr(self, name)} not divisible by n_heads {self.n_heads}")

    @property
    def n_patches(self):
        side = self.image_size // self.patch_size
        return side * side

    @property
    def seq_len_image(self):
        return 1 + self.n_patches

    def to_dict(self):
        d = asdict(self)
        d["extract_layers"] = list(self.extract_layers)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"model: unknown fields {sorted(extra)}")
        return cls(**d)


# Reference full-scale dims, used only for parameter accounting.
CLIP_B_CONFIG = ModelConfig(
    image_size=224, patch_size=16, d_v=768, d_t=512,
    n_layers_v=12, n_layers_t=12, n_heads=8, proj_dim=512,
    extract_layers=(3, 6, 9), vocab_size=49408, max_text_len=77, decoder_dim=64,
)


@dataclass
class EncoderTrace:
    """Final activation plus the per-layer activations the decoder taps."""
    final: Tensor
    extracted: dict = field(default_factory=dict)


class ParamSet:
    """Ordered registry of uniquely named parameters."""

    def __init__(self):
        self._params = {}

    def register(self, param):
        if param.name in self._params:
            raise ConfigError(f"duplicate parameter name: {param.name}")
        self._params[param.name] = param
        return param

    def parameters(self):
        return list(self._params.values())

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)


class Linear:
    def __init__(self, params, name, d_in, d_out, rng, std=0.02, bias=True, dtype=np.float64):
        self.weight = params.register(
            Parameter(f"{name}.weight", trunc_normal(rng, (d_in, d_out), std), dtype=dtype)
        )
        self.bias = None
        if bias:
            self.bias = params.register(Parameter(f"{name}.bias", np.zeros(d_out), dtype=dtype))

    def __call__(self, x):
        vec = x.ndim == 1
        if vec:
            x = T.reshape(x, (1, x.shape[0]))
        y = T.matmul(x, self.weight.tensor)
        if self.bias is not None:
            y = T.add(y, self.bias.tensor)
        if vec:
            y = T.reshape(y, (y.shape[-1],))
        return y


class LayerNorm:
    def __init__(self, params, name, d, dtype=np.float64):
        self.gain = params.register(Parameter(f"{name}.gain", np.ones(d), dtype=dtype))
        self.bias = params.register(Parameter(f"{name}.bias", np.zeros(d), dtype=dtype))

    def __call__(self, x):
        return T.add(T.mul(T.layer_norm(x), self.gain.tensor), self.bias.tensor)


def _split_heads(x, n_heads):
    # [*, S, D] -> [*, h, S, D/h]
    lead = x.shape[:-2]
    s, d = x.shape[-2], x.shape[-1]
    nl = len(lead)
    x = T.reshape(x, lead + (s, n_heads, d // n_heads))
    return T.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def _merge_heads(x):
    # [*, h, S, dh] -> [*, S, h*dh]
    lead = x.shape[:-3]
    h, s, dh = x.shape[-3], x.shape[-2], x.shape[-1]
    nl = len(lead)
    x = T.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return T.reshape(x, lead + (s, h * dh))


def _swap_last_two(x):
    nd = x.ndim
    return T.transpose(x, tuple(range(nd - 2)) + (nd - 1, nd - 2))


class MultiHeadSelfAttention:
    def __init__(self, params, name, d, n_heads, rng, dtype=np.float64):
        self.n_heads = n_heads
        self.scale = 1.0 / np.sqrt(d // n_heads)
        self.wq = Linear(params, f"{name}.wq", d, d, rng, dtype=dtype)
        self.wk = Linear(params, f"{name}.wk", d, d, rng, dtype=dtype)
        self.wv = Linear(params, f"{name}.wv", d, d, rng, dtype=dtype)
        self.wo = Linear(params, f"{name}.wo", d, d, rng, dtype=dtype)

    def __call__(self, x, causal=False):
        q = _split_heads(self.wq(x), self.n_heads)
        k = _split_heads(self.wk(x), self.n_heads)
        v = _split_heads(self.wv(x), self.n_heads)
        att = T.mul(T.matmul(q, _swap_last_two(k)), T.Tensor(np.asarray(self.scale, dtype=x.dtype)))
        if causal:
            s = x.shape[-2]
            mask = np.triu(np.full((s, s), -1e9, dtype=x.dtype), k=1)
            att = T.add(att, T.Tensor(mask))
        att = T.softmax(att, axis=-1)
        out = _merge_heads(T.matmul(att, v))
        return self.wo(out)


class TransformerBlock:
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x)).

    Optional adapter callables transform the attention/MLP outputs just
    before their residual additions.
    """

    def __init__(self, params, name, d, n_heads, rng, dtype=np.float64, mlp_ratio=4):
        self.ln1 = LayerNorm(params, f"{name}.ln1", d, dtype=dtype)
        self.attn = MultiHeadSelfAttention(params, f"{name}.attn", d, n_heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(params, f"{name}.ln2", d, dtype=dtype)
        self.fc1 = Linear(params, f"{name}.mlp.fc1", d, mlp_ratio * d, rng, dtype=dtype)
        self.fc2 = Linear(params, f"{name}.mlp.fc2", mlp_ratio * d, d, rng, dtype=dtype)

    def __call__(self, x, causal=False, msa_adapter=None, mlp_adapter=None):
        a = self.attn(self.ln1(x), causal=causal)
        if msa_adapter is not None:
            a = msa_adapter(a)
        x = T.add(x, a)
        m = self.fc2(T.gelu(self.fc1(self.ln2(x))))
        if mlp_adapter is not None:
            m = mlp_adapter(m)
        return T.add(x, m)


class VLSMModel:
    """Dual-encoder backbone with a tapped-skip decoder.

    encode_image / encode_text accept an optional mapping
    ``{("msa"|"mlp", layer): callable}`` that is applied to the named
    sublayer output before its residual addition (dense adaptation).
    """

    def __init__(self, cfg: ModelConfig, seed=0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        self.params = ParamSet()
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        p, dv, dt, dd = cfg.patch_size, cfg.d_v, cfg.d_t, cfg.decoder_dim

        self.patch_embed = Linear(self.params, "image.patch_embed", p * p * 3, dv, rng, dtype=dtype)
        self.cls = self.params.register(
            Parameter("image.cls", trunc_normal(rng, (1, dv)), dtype=dtype))
        self.pos_image = self.params.register(
            Parameter("image.pos", trunc_normal(rng, (cfg.seq_len_image, dv)), dtype=dtype))
        self.image_blocks = [
            TransformerBlock(self.params, f"image.blocks.{i}", dv, cfg.n_heads, rng, dtype=dtype)
            for i in range(1, cfg.n_layers_v + 1)
        ]

        self.tok_embed = self.params.register(
            Parameter("text.tok_embed", trunc_normal(rng, (cfg.vocab_size, dt)), dtype=dtype))
        self.pos_text = self.params.register(
            Parameter("text.pos", trunc_normal(rng, (cfg.max_text_len, dt)), dtype=dtype))
        self.text_blocks = [
            TransformerBlock(self.params, f"text.blocks.{i}", dt, cfg.n_heads, rng, dtype=dtype)
            for i in range(1, cfg.n_layers_t + 1)
        ]
        self.ln_text_final = LayerNorm(self.params, "text.ln_final", dt, dtype=dtype)
        self.text_proj = self.params.register(
            Parameter("text.proj", trunc_normal(rng, (dt, cfg.proj_dim)), dtype=dtype))

        self.stage_projs = {
            l: Linear(self.params, f"decoder.stage_projs.{l}", dv, dd, rng, dtype=dtype)
            for l in cfg.extract_layers
        }
        self.film_scale = Linear(self.params, "decoder.film_scale", cfg.proj_dim, dd, rng, dtype=dtype)
        self.film_shift = Linear(self.params, "decoder.film_shift", cfg.proj_dim, dd, rng, dtype=dtype)
        self.decoder_blocks = [
            TransformerBlock(self.params, f"decoder.blocks.{i}", dd, cfg.n_heads, rng, dtype=dtype)
            for i in range(1, 3)
        ]
        self.head = Linear(self.params, "decoder.head", dd, p * p, rng, dtype=dtype)

    # -- encoders -----------------------------------------------------------

    def encode_image(self, v, adapters=None) -> EncoderTrace:
        cfg = self.cfg
        if not isinstance(v, Tensor):
            v = Tensor(np.asarray(v), dtype=self.dtype)
        if v.ndim not in (3, 4) or v.shape[-3:] != (cfg.image_size, cfg.image_size, 3):
            raise DimensionError(
                f"encode_image: expected [..., {cfg.image_size}, {cfg.image_size}, 3], got {v.shape}"
            )
        lead = v.shape[:-3]
        nl = len(lead)
        side = cfg.image_size // cfg.patch_size
        p = cfg.patch_size
        x = T.reshape(v, lead + (side, p, side, p, 3))
        x = T.transpose(x, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
        x = T.reshape(x, lead + (cfg.n_patches, p * p * 3))
        x = self.patch_embed(x)
        cls = self.cls.tensor
        if nl:
            cls = T.broadcast_to(cls, lead + (1, cfg.d_v))
        x = T.concat([cls, x], axis=-2)
        x = T.add(x, self.pos_image.tensor)

        extracted = {}
        for layer, block in enumerate(self.image_blocks, start=1):
            x = block(
                x,
                causal=False,
                msa_adapter=adapters.get(("msa", layer)) if adapters else None,
                mlp_adapter=adapters.get(("mlp", layer)) if adapters else None,
            )
            if layer in cfg.extract_layers:
                extracted[layer] = x
        return EncoderTrace(final=x, extracted=extracted)

    def _prepare_text(self, ids):
        """Normalize prompt ids to a padded int array plus EOS positions.

        Returns (ids_array, eos_positions, batched) where ids_array is
        [S] or [B, S].  Overlong sequences are truncated to max_text_len
        with a warning; the pooled position is the final kept token.
        """
        cfg = self.cfg
        batched = bool(ids) and isinstance(ids[0], (list, tuple, np.ndarray))
        seqs = [list(s) for s in ids] if batched else [list(ids)]
        clipped = []
        for s in seqs:
            if len(s) == 0:
                raise ContractError("encode_text: empty token sequence")
            if len(s) > cfg.max_text_len:
                log.warning(
                    "prompt of %d tokens truncated to max_text_len=%d", len(s), cfg.max_text_len
                )
                s = s[: cfg.max_text_len]
            clipped.append(s)
        eos = np.array([len(s) - 1 for s in clipped], dtype=np.int64)
        width = max(len(s) for s in clipped)
        arr = np.zeros((len(clipped), width), dtype=np.int64)
        for i, s in enumerate(clipped):
            arr[i, : len(s)] = s
        if not batched:
            return arr[0], int(eos[0]), False
        return arr, eos, True

    def encode_text(self, ids, adapters=None):
        """Returns (EncoderTrace, conditioning vector of length proj_dim)."""
        cfg = self.cfg
        arr, eos, batched = self._prepare_text(ids)
        x = T.embedding_lookup(self.tok_embed.tensor, arr)
        x = T.add(x, self.pos_text.tensor[: arr.shape[-1]])
        extracted = {}
        for layer, block in enumerate(self.text_blocks, start=1):
            x = block(
                x,
                causal=True,
                msa_adapter=adapters.get(("msa", layer)) if adapters else None,
                mlp_adapter=adapters.get(("mlp", layer)) if adapters else None,
            )
            if layer in cfg.extract_layers:
                extracted[layer] = x
        final = self.ln_text_final(x)
        trace = EncoderTrace(final=final, extracted=extracted)
        cond = self.project_text(self.pool_text(trace, eos_positions=eos, batched=batched))
        return trace, cond

    def pool_text(self, trace, ids=None, eos_positions=None, batched=None):
        """Slice the end-of-sequence position out of the final activation."""
        if eos_positions is None:
            _, eos_positions, batched = self._prepare_text(ids)
        if batched:
            rows = np.arange(trace.final.shape[0])
            return trace.final[(rows, np.asarray(eos_positions))]
        return trace.final[int(eos_positions)]

    def project_text(self, pooled):
        vec = pooled.ndim == 1
        if vec:
            pooled = T.reshape(pooled, (1, pooled.shape[0]))
        cond = T.matmul(pooled, self.text_proj.tensor)
        if vec:
            cond = T.reshape(cond, (cond.shape[-1],))
        return cond

    # -- decoder --------------------------------------------------------------

    def decode(self, trace, cond):
        cfg = self.cfg
        for l in cfg.extract_layers:
            if l not in trace.extracted:
                raise ContractError(f"decode: trace is missing extracted layer {l}")
        fused = None
        for l in cfg.extract_layers:
            stage = self.stage_projs[l](trace.extracted[l])
            fused = stage if fused is None else T.add(fused, stage)

        # per-channel scale centered at 1 so the frozen path passes signal at init
        gamma = self.film_scale(cond)
        beta = self.film_shift(cond)
        if fused.ndim == 3:
            gamma = T.reshape(gamma, (gamma.shape[0], 1, gamma.shape[-1]))
            beta = T.reshape(beta, (beta.shape[0], 1, beta.shape[-1]))
        one = T.Tensor(np.asarray(1.0, dtype=fused.dtype))
        x = T.add(T.mul(fused, T.add(one, gamma)), beta)

        for block in self.decoder_blocks:
            x = block(x, causal=False)

        idx = (slice(None),) * (x.ndim - 2) + (slice(1, None), slice(None))
        tokens = x[idx]
        logits = self.head(tokens)
        lead = logits.shape[:-2]
        nl = len(lead)
        side = cfg.image_size // cfg.patch_size
        p = cfg.patch_size
        logits = T.reshape(logits, lead + (side, side, p, p))
        logits = T.transpose(logits, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3))
        return T.reshape(logits, lead + (cfg.image_size, cfg.image_size))

    def forward(self, v, ids):
        trace = self.encode_image(v)
        _, cond = self.encode_text(ids)
        return self.decode(trace, cond)

    # -- parameter management ---------------------------------------------------

    def parameters(self):
        return self.params.parameters()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def freeze_backbone(model):
    """Mark every backbone parameter non-trainable."""
    for p in model.parameters():
        p.trainable = False


DEFAULT_TOY_CONFIG = ModelConfig()
