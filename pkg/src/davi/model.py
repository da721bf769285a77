"""Dual visual-linguistic interaction model and the single-interaction baseline.

Everything here is a pure function of a :class:`ModelParams` and input
tensors. Inputs may be a single sample (image ``3×H×W``, tokens ``L``) or a
batch with a leading axis; outputs follow the same convention.

Graph of the main model::

    image ─ VE ─┬─ last level ─ VLE(question) ─ evidence ─┬─ LD ─ answer logits
                └─ tapped levels ─────────────── LVD ─────┴─ segmentor ─ mask logits
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, DimensionError, Tensor

@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 128
    n_heads: int = 4
    ve_layers: int = 6
    vle_layers: int = 4
    ld_layers: int = 4
    lvd_levels: int = 3
    text_vocab_size: int = 22
    answer_vocab_size: int = 22
    max_question_len: int = 8
    max_answer_len: int = 3
    ffn_mult: int = 4
    init_std: float = 0.02  # std of the normal draw for every weight matrix and embedding

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    @property
    def taps(self) -> tuple[int, ...]:
        """1-based VE block indices whose outputs feed the visual decoder."""
        n, L = self.lvd_levels, self.ve_layers
        return tuple(L * (i + 1) // n for i in range(n))

    # baseline depths: text encoder stands in for VLE+LD, visual encoder for VE
    @property
    def le_layers(self) -> int:
        return self.vle_layers + self.ld_layers

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "init_std":
                if not isinstance(v, (int, float)) or not 0 < v < math.inf:
                    raise ConfigurationError(f"init_std must be a positive number, got {v!r}")
            elif not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigurationError(f"{f.name} must be a positive integer, got {v!r}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 4:
            raise ConfigurationError(f"d_model {self.d_model} must be divisible by 4 (segmentor widths)")
        if self.lvd_levels > self.ve_layers:
            raise ConfigurationError(f"lvd_levels {self.lvd_levels} exceeds ve_layers {self.ve_layers}")
        if self.max_answer_len < 2:
            raise ConfigurationError("max_answer_len must leave room for BOS and EOS")

    def to_dict(self) -> dict[str, int | float]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d) -> ModelConfig:
        kinds = {f.name: (float if f.name == "init_std" else int) for f in dataclasses.fields(cls)}
        return cls(**{k: kinds[k](v) for k, v in d.items() if k in kinds})


def tiny_config(**overrides) -> ModelConfig:
    """Two blocks everywhere, d_model 16, 16×16 image: used by gradient checks."""
    base = dict(
        image_size=16, patch_size=8, d_model=16, n_heads=2,
        ve_layers=2, vle_layers=2, ld_layers=2, lvd_levels=2,
        text_vocab_size=22, answer_vocab_size=22, max_question_len=5, max_answer_len=3,
    )
    base.update(overrides)
    return ModelConfig(**base)


class ModelParams:
    """Named parameter tensors plus the config that shapes them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor], kind: str = "davi"):
        self.config = config
        self.tensors = tensors
        self.kind = kind

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self, requires_grad: bool | None = None) -> ModelParams:
        out = {}
        for k, t in self.tensors.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[k] = Tensor(t.data.copy(), requires_grad=rg, name=k)
        return ModelParams(self.config, out, self.kind)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


# ---------------------------------------------------------------------------
# shape manifest


def _linear(m: dict, name: str, d_in: int, d_out: int) -> None:
    m[f"{name}.weight"] = (d_in, d_out)
    m[f"{name}.bias"] = (d_out,)


def _norm(m: dict, name: str, d: int) -> None:
    m[f"{name}.gain"] = (d,)
    m[f"{name}.bias"] = (d,)


def _attn(m: dict, name: str, d: int) -> None:
    for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
        _linear(m, f"{name}.{proj}", d, d)


def _ffn(m: dict, name: str, d: int, mult: int) -> None:
    _linear(m, f"{name}.fc1", d, mult * d)
    _linear(m, f"{name}.fc2", mult * d, d)


def _block(m: dict, name: str, d: int, mult: int, cross: bool) -> None:
    _norm(m, f"{name}.ln1", d)
    _attn(m, f"{name}.attn", d)
    if cross:
        _norm(m, f"{name}.ln_cross", d)
        _attn(m, f"{name}.cross", d)
    _norm(m, f"{name}.ln2", d)
    _ffn(m, f"{name}.ffn", d, mult)


def _segmentor(m: dict, name: str, d: int) -> None:
    m[f"{name}.conv1.weight"] = (d // 2, d, 3, 3)
    m[f"{name}.conv1.bias"] = (d // 2,)
    m[f"{name}.conv2.weight"] = (d // 4, d // 2, 3, 3)
    m[f"{name}.conv2.bias"] = (d // 4,)
    m[f"{name}.conv3.weight"] = (1, d // 4, 1, 1)
    m[f"{name}.conv3.bias"] = (1,)


def param_manifest(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter paths and shapes of the dual-interaction model."""
    config.validate()
    c, d, mult = config, config.d_model, config.ffn_mult
    m: dict[str, tuple[int, ...]] = {}
    _linear(m, "ve.patch_embed", c.patch_dim, d)
    m["ve.pos_embed"] = (c.n_patches, d)
    for i in range(c.ve_layers):
        _block(m, f"ve.block{i}", d, mult, cross=False)
    for level, _ in enumerate(c.taps):
        _norm(m, f"ve.tap{level}.ln", d)

    m["vle.tok_embed"] = (c.text_vocab_size, d)
    m["vle.pos_embed"] = (c.max_question_len, d)
    for i in range(c.vle_layers):
        _block(m, f"vle.block{i}", d, mult, cross=True)
    _norm(m, "vle.ln_out", d)

    m["ld.tok_embed"] = (c.answer_vocab_size, d)
    m["ld.pos_embed"] = (c.max_answer_len - 1, d)
    for i in range(c.ld_layers):
        _block(m, f"ld.block{i}", d, mult, cross=True)
    _norm(m, "ld.ln_out", d)
    _linear(m, "ld.head", d, c.answer_vocab_size)

    for level in range(c.lvd_levels):
        _linear(m, f"lvd.level{level}.proj", d, d)
        _norm(m, f"lvd.level{level}.ln_cross", d)
        _attn(m, f"lvd.level{level}.cross", d)
    _norm(m, "lvd.ln_fuse", d)
    _segmentor(m, "seg", d)
    return m


def baseline_manifest(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameters of the single-interaction baseline (text-conditioned visual encoder)."""
    config.validate()
    c, d, mult = config, config.d_model, config.ffn_mult
    m: dict[str, tuple[int, ...]] = {}
    m["le.tok_embed"] = (c.text_vocab_size, d)
    m["le.pos_embed"] = (c.max_question_len, d)
    for i in range(c.le_layers):
        _block(m, f"le.block{i}", d, mult, cross=False)
    _norm(m, "le.ln_out", d)

    _linear(m, "lve.patch_embed", c.patch_dim, d)
    m["lve.pos_embed"] = (c.n_patches, d)
    for i in range(c.ve_layers):
        _block(m, f"lve.block{i}", d, mult, cross=True)
    for level, _ in enumerate(c.taps):
        _norm(m, f"lve.tap{level}.ln", d)

    for level in range(c.lvd_levels):
        _linear(m, f"vd.level{level}.proj", d, d)
    _norm(m, "vd.ln_fuse", d)
    _segmentor(m, "seg", d)
    return m


def grid_positions(n_patches: int, d: int) -> np.ndarray:
    """Fixed 2-D sin/cos table: first half of the channels encodes x, second half y.

    Used only as the starting value of the (learned) visual position table, so
    patch coordinates are linearly readable from the first step.
    """
    g = math.isqrt(n_patches)
    if g * g != n_patches:
        raise DimensionError(f"{n_patches} patches do not form a square grid")
    quarter = d // 4
    freqs = 1.0 / (g ** (np.arange(quarter) / max(quarter, 1)))
    ys, xs = np.divmod(np.arange(n_patches), g)
    table = np.zeros((n_patches, d))
    for offset, coord in ((0, xs), (2 * quarter, ys)):
        ang = (coord[:, None] + 0.5) / g * math.pi * freqs[None, :]
        table[:, offset : offset + quarter] = np.sin(ang)
        table[:, offset + quarter : offset + 2 * quarter] = np.cos(ang)
    return table


def _init(manifest: dict[str, tuple[int, ...]], seed: int, std: float) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in manifest.items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "gain":
            arr = np.ones(shape)
        elif leaf == "bias":
            arr = np.zeros(shape)
        elif name in ("ve.pos_embed", "lve.pos_embed"):
            arr = grid_positions(*shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
        out[name] = Tensor(arr, requires_grad=True, name=name)
    return out


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    return ModelParams(config, _init(param_manifest(config), seed, config.init_std), kind="davi")


def init_baseline_params(config: ModelConfig, seed: int) -> ModelParams:
    return ModelParams(config, _init(baseline_manifest(config), seed, config.init_std), kind="baseline")


def init_for_kind(kind: str, config: ModelConfig, seed: int) -> ModelParams:
    if kind == "davi":
        return init_params(config, seed)
    if kind == "baseline":
        return init_baseline_params(config, seed)
    raise ConfigurationError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# building blocks


def _ln(p: ModelParams, name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, p[f"{name}.gain"], p[f"{name}.bias"])


def _lin(p: ModelParams, name: str, x: Tensor) -> Tensor:
    return T.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])


def _additive_mask(key_valid: np.ndarray | None, n_q: int, n_k: int, causal: bool):
    """Build a B×1×Lq×Lk (or 1×1×Lq×Lk) additive mask, or None."""
    mask = None
    if key_valid is not None:
        kv = np.asarray(key_valid, dtype=bool)
        mask = np.where(kv, 0.0, T.MASK_VALUE)[:, None, None, :]
    if causal:
        tri = np.where(np.tril(np.ones((n_q, n_k), dtype=bool)), 0.0, T.MASK_VALUE)[None, None]
        mask = tri if mask is None else mask + tri
    return mask


def attention(
    p: ModelParams,
    name: str,
    queries: Tensor,
    keys_values: Tensor,
    key_valid: np.ndarray | None = None,
    causal: bool = False,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention on batched B×L×d inputs."""
    h = p.config.n_heads
    b, lq, d = queries.shape
    lk = keys_values.shape[1]
    dh = d // h

    def heads(x: Tensor, n: int) -> Tensor:
        return x.reshape(b, n, h, dh).transpose(0, 2, 1, 3)

    q = heads(_lin(p, f"{name}.q_proj", queries), lq)
    k = heads(_lin(p, f"{name}.k_proj", keys_values), lk)
    v = heads(_lin(p, f"{name}.v_proj", keys_values), lk)
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    mask = _additive_mask(key_valid, lq, lk, causal)
    if mask is not None:
        scores = scores + mask
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, lq, d)
    out = _lin(p, f"{name}.o_proj", ctx)
    return (out, weights) if return_weights else out


def _ffn_fwd(p: ModelParams, name: str, x: Tensor) -> Tensor:
    return _lin(p, f"{name}.fc2", T.gelu(_lin(p, f"{name}.fc1", x)))


def transformer_block(
    p: ModelParams,
    name: str,
    x: Tensor,
    self_valid: np.ndarray | None = None,
    causal: bool = False,
    memory: Tensor | None = None,
    memory_valid: np.ndarray | None = None,
) -> Tensor:
    """Pre-norm block: self-attention, optional cross-attention, FFN."""
    hx = _ln(p, f"{name}.ln1", x)
    x = x + attention(p, f"{name}.attn", hx, hx, key_valid=self_valid, causal=causal)
    if memory is not None:
        x = x + attention(p, f"{name}.cross", _ln(p, f"{name}.ln_cross", x), memory, key_valid=memory_valid)
    return x + _ffn_fwd(p, f"{name}.ffn", _ln(p, f"{name}.ln2", x))


def _as_batch(x, ndim_single: int) -> tuple[np.ndarray | Tensor, bool]:
    if x.ndim == ndim_single:
        if isinstance(x, Tensor):
            return x.reshape((1,) + x.shape), True
        return np.asarray(x)[None], True
    return x, False


def _squeeze(x: Tensor) -> Tensor:
    return x.reshape(x.shape[1:])


# ---------------------------------------------------------------------------
# visual encoder


def patchify(image: Tensor, patch: int) -> Tensor:
    """B×3×H×W → B×(g·g)×(3·patch·patch), rows in raster order of the patch grid."""
    b, c, hgt, wid = image.shape
    gh, gw = hgt // patch, wid // patch
    x = image.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def _check_image(cfg: ModelConfig, image: Tensor) -> None:
    if image.shape[-3:] != (3, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"image shape {image.shape[-3:]} does not match 3×{cfg.image_size}×{cfg.image_size}"
        )


def _visual_tokens(p: ModelParams, prefix: str, image: Tensor) -> Tensor:
    cfg = p.config
    _check_image(cfg, image)
    tokens = _lin(p, f"{prefix}.patch_embed", patchify(image, cfg.patch_size))
    return tokens + p[f"{prefix}.pos_embed"]


def ve_forward(p: ModelParams, image) -> list[Tensor]:
    """Visual encoder; returns one n_patches×d feature map per configured tap."""
    image = T.as_tensor(image)
    image, single = _as_batch(image, 3)
    x = _visual_tokens(p, "ve", image)
    taps = p.config.taps
    levels = []
    for i in range(p.config.ve_layers):
        x = transformer_block(p, f"ve.block{i}", x)
        if i + 1 in taps:
            levels.append(_ln(p, f"ve.tap{taps.index(i + 1)}.ln", x))
    return [_squeeze(l) for l in levels] if single else levels


# ---------------------------------------------------------------------------
# visual-based linguistic encoder


@dataclass
class EvidenceFeatures:
    """Linguistic-oriented evidence: question_len×d plus the key validity mask."""

    features: Tensor
    valid: np.ndarray
    truncated: bool = False


def _prepare_tokens(tokens, valid, max_len: int):
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    if valid is None:
        valid = np.ones(tokens.shape, dtype=bool)
    else:
        valid = np.asarray(valid, dtype=bool)
        if single:
            valid = valid[None]
    truncated = tokens.shape[1] > max_len
    if truncated:
        tokens, valid = tokens[:, :max_len], valid[:, :max_len]
    elif tokens.shape[1] < max_len:
        pad = max_len - tokens.shape[1]
        tokens = np.pad(tokens, ((0, 0), (0, pad)))
        valid = np.pad(valid, ((0, 0), (0, pad)))
    return tokens, valid, truncated, single


def _text_embed(p: ModelParams, prefix: str, tokens: np.ndarray, vocab: int) -> Tensor:
    if tokens.size and tokens.max() >= vocab:
        raise IndexError(f"token id {int(tokens.max())} >= vocabulary size {vocab}")
    x = T.take_rows(p[f"{prefix}.tok_embed"], tokens)
    pos = p[f"{prefix}.pos_embed"]
    if tokens.shape[1] != pos.shape[0]:
        pos = T.select(pos, slice(0, tokens.shape[1]))
    return x + pos


def vle_forward(p: ModelParams, question_tokens, question_valid, visual_last: Tensor) -> EvidenceFeatures:
    """Question encoder whose blocks cross-attend to the last visual level.

    Questions longer than ``max_question_len`` are truncated and flagged.
    """
    cfg = p.config
    tokens, valid, truncated, single = _prepare_tokens(question_tokens, question_valid, cfg.max_question_len)
    visual_last, _ = _as_batch(visual_last, 2)
    x = _text_embed(p, "vle", tokens, cfg.text_vocab_size)
    for i in range(cfg.vle_layers):
        x = transformer_block(p, f"vle.block{i}", x, self_valid=valid, memory=visual_last)
    x = _ln(p, "vle.ln_out", x)
    if single:
        return EvidenceFeatures(_squeeze(x), valid[0], truncated)
    return EvidenceFeatures(x, valid, truncated)


# ---------------------------------------------------------------------------
# linguistic decoder


def _evidence_batch(evidence: EvidenceFeatures):
    feats, valid = evidence.features, np.asarray(evidence.valid, dtype=bool)
    if feats.ndim == 2:
        return feats.reshape((1,) + feats.shape), valid[None], True
    return feats, valid, False


def ld_logits(p: ModelParams, evidence: EvidenceFeatures, input_tokens) -> Tensor:
    """Teacher-forced decoder logits, one row per input position."""
    cfg = p.config
    mem, mem_valid, single = _evidence_batch(evidence)
    tokens = np.asarray(input_tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.shape[0] != mem.shape[0]:
        tokens = np.broadcast_to(tokens, (mem.shape[0], tokens.shape[1]))
    x = _text_embed(p, "ld", tokens, cfg.answer_vocab_size)
    for i in range(cfg.ld_layers):
        x = transformer_block(p, f"ld.block{i}", x, causal=True, memory=mem, memory_valid=mem_valid)
    logits = _lin(p, "ld.head", _ln(p, "ld.ln_out", x))
    return _squeeze(logits) if single else logits


def ld_greedy(p: ModelParams, evidence: EvidenceFeatures, bos: int, eos: int):
    """Greedy decode. Returns (token lists without BOS, summed log-probabilities)."""
    cfg = p.config
    mem, mem_valid, single = _evidence_batch(evidence)
    b = mem.shape[0]
    steps = cfg.max_answer_len - 1
    seqs = np.full((b, 1), bos, dtype=np.int64)
    logp = np.zeros(b)
    done = np.zeros(b, dtype=bool)
    out: list[list[int]] = [[] for _ in range(b)]
    ev = EvidenceFeatures(mem, mem_valid)
    with T.no_grad():
        for _ in range(steps):
            logits = ld_logits(p, ev, seqs).data[:, -1, :].astype(np.float64)
            lsm = logits - logits.max(axis=-1, keepdims=True)
            lsm = lsm - np.log(np.exp(lsm).sum(axis=-1, keepdims=True))
            nxt = lsm.argmax(axis=-1)
            for i in range(b):
                if not done[i]:
                    logp[i] += lsm[i, nxt[i]]
                    out[i].append(int(nxt[i]))
                    done[i] = nxt[i] == eos
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return (out[0], float(logp[0])) if single else (out, logp)


def ld_decode(p: ModelParams, evidence: EvidenceFeatures, answer_tokens=None, *, bos: int = 1, eos: int = 2):
    """Teacher-forced logits when ``answer_tokens`` (decoder inputs) is given, else greedy tokens."""
    if answer_tokens is not None:
        return ld_logits(p, evidence, answer_tokens)
    return ld_greedy(p, evidence, bos, eos)[0]


# ---------------------------------------------------------------------------
# linguistic-based visual decoder and segmentor


def lvd_forward(p: ModelParams, levels: list[Tensor], evidence: EvidenceFeatures) -> Tensor:
    """Visual tokens query the evidence at each level; levels summed and normalised.

    Returns d×g×g (or B×d×g×g).
    """
    cfg = p.config
    if len(levels) != cfg.lvd_levels:
        raise DimensionError(f"expected {cfg.lvd_levels} visual levels, got {len(levels)}")
    mem, mem_valid, _ = _evidence_batch(evidence)
    single = levels[0].ndim == 2
    fused = None
    for i, feat in enumerate(levels):
        if single:
            feat = feat.reshape((1,) + feat.shape)
        v = _lin(p, f"lvd.level{i}.proj", feat)
        v = v + attention(p, f"lvd.level{i}.cross", _ln(p, f"lvd.level{i}.ln_cross", v), mem, key_valid=mem_valid)
        fused = v if fused is None else fused + v
    fused = _ln(p, "lvd.ln_fuse", fused)
    return _tokens_to_grid(fused, cfg, single)


def _tokens_to_grid(x: Tensor, cfg: ModelConfig, single: bool) -> Tensor:
    b = x.shape[0]
    g = cfg.grid
    grid = x.transpose(0, 2, 1).reshape(b, cfg.d_model, g, g)
    return _squeeze(grid) if single else grid


def segment_head(p: ModelParams, fused: Tensor, prefix: str = "seg") -> Tensor:
    """Three-conv segmentor then bilinear upsample; returns H×W (or B×H×W) logits.

    The 3×3 convs replicate border pixels, so a constant input stays constant.
    """
    cfg = p.config
    single = fused.ndim == 3
    x = fused.reshape((1,) + fused.shape) if single else fused
    x = T.gelu(T.conv2d(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], padding=1, pad_mode="edge"))
    x = T.gelu(T.conv2d(x, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], padding=1, pad_mode="edge"))
    x = T.conv2d(x, p[f"{prefix}.conv3.weight"], p[f"{prefix}.conv3.bias"])
    x = T.upsample_bilinear(x, cfg.image_size, cfg.image_size)
    b = x.shape[0]
    x = x.reshape(b, cfg.image_size, cfg.image_size)
    return _squeeze(x) if single else x


# ---------------------------------------------------------------------------
# full models


@dataclass
class DaviOutput:
    answer_logits: Tensor
    mask_logits: Tensor
    evidence: EvidenceFeatures = field(repr=False)


def davi_forward(p: ModelParams, image, question_tokens, question_valid=None, answer_inputs=None) -> DaviOutput:
    """VE → VLE → {LD, LVD → segmentor}. Both heads read the same evidence.

    ``answer_inputs`` are the teacher-forced decoder inputs (BOS-prefixed);
    they default to a lone BOS.
    """
    image = T.as_tensor(image)
    single = image.ndim == 3
    levels = ve_forward(p, image)
    evidence = vle_forward(p, question_tokens, question_valid, levels[-1])
    if answer_inputs is None:
        answer_inputs = np.array([1], dtype=np.int64)
    answer_logits = ld_logits(p, evidence, answer_inputs)
    mask_logits = segment_head(p, lvd_forward(p, levels, evidence))
    if single and answer_logits.ndim == 3:
        answer_logits = _squeeze(answer_logits)
    return DaviOutput(answer_logits, mask_logits, evidence)


def le_forward(p: ModelParams, question_tokens, question_valid=None):
    """Baseline text encoder: self-attention only, no visual input."""
    cfg = p.config
    tokens, valid, _, single = _prepare_tokens(question_tokens, question_valid, cfg.max_question_len)
    x = _text_embed(p, "le", tokens, cfg.text_vocab_size)
    for i in range(cfg.le_layers):
        x = transformer_block(p, f"le.block{i}", x, self_valid=valid)
    return _ln(p, "le.ln_out", x), valid, single


def baseline_forward(p: ModelParams, image, question_tokens, question_valid=None) -> Tensor:
    """Single-interaction baseline: text states condition the visual encoder; mask only."""
    cfg = p.config
    image = T.as_tensor(image)
    image, single = _as_batch(image, 3)
    text, valid, _ = le_forward(p, question_tokens, question_valid)
    if text.shape[0] != image.shape[0]:
        raise DimensionError(f"batch mismatch: {image.shape[0]} images, {text.shape[0]} questions")
    x = _visual_tokens(p, "lve", image)
    taps = cfg.taps
    fused = None
    for i in range(cfg.ve_layers):
        x = transformer_block(p, f"lve.block{i}", x, memory=text, memory_valid=valid)
        if i + 1 in taps:
            level = taps.index(i + 1)
            v = _lin(p, f"vd.level{level}.proj", _ln(p, f"lve.tap{level}.ln", x))
            fused = v if fused is None else fused + v
    fused = _ln(p, "vd.ln_fuse", fused)
    logits = segment_head(p, _tokens_to_grid(fused, cfg, False))
    return _squeeze(logits) if single else logits
