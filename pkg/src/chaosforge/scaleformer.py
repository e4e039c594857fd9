"""Hierarchical encoder-decoder forecaster over patched, lifted trajectories.

Levels halve temporal resolution and double feature width; each level runs
axial attention blocks (variable axis without positions, temporal axis with
rotary positions) followed by a sparse mixture-of-experts feed-forward.
Encoder states reach the decoder through convolutional skip blocks, and a
frequency-fingerprint-conditioned head emits the forecast. All parameters are
shared across variables, so any V works and variable order is immaterial.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import features, tensor
from .util import DataError, atomic_write_bytes, make_rng

CHECKPOINT_MAGIC = b"CHXM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_e: int = 32
    levels: int = 3
    blocks_per_level: tuple = (1, 1, 1)
    heads: tuple = (2, 4, 8)
    num_experts: int = 8
    active_experts: int = 2
    skip_depths: tuple = (1, 1)
    horizon: int = 128
    patch_len: int = 8
    fingerprint_rows: int = 48
    stochastic_depth_rate: float = 0.1
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.levels < 1:
            raise DataError("levels must be >= 1")
        if len(self.blocks_per_level) != self.levels or len(self.heads) != self.levels:
            raise DataError("blocks_per_level and heads must have one entry per level")
        if len(self.skip_depths) != self.levels - 1:
            raise DataError("skip_depths must have levels-1 entries")
        if self.active_experts > self.num_experts or self.active_experts < 1:
            raise DataError("need 1 <= active_experts <= num_experts")
        for lv in range(self.levels):
            d = self.level_width(lv + 1)
            h = self.heads[lv]
            if d % h:
                raise DataError(f"level {lv + 1} width {d} not divisible by {h} heads")
            if (d // h) % 2:
                raise DataError(f"level {lv + 1} head dim {d // h} must be even for rotary positions")

    def level_width(self, level):
        return self.d_e * 2 ** (level - 1)

    def expert_hidden(self, level):
        return max(16, self.level_width(level) // 2)


def config_to_json(cfg):
    return {
        "d_e": cfg.d_e,
        "levels": cfg.levels,
        "blocks_per_level": list(cfg.blocks_per_level),
        "heads": list(cfg.heads),
        "num_experts": cfg.num_experts,
        "active_experts": cfg.active_experts,
        "skip_depths": list(cfg.skip_depths),
        "horizon": cfg.horizon,
        "patch_len": cfg.patch_len,
        "fingerprint_rows": cfg.fingerprint_rows,
        "stochastic_depth_rate": cfg.stochastic_depth_rate,
        "rope_base": cfg.rope_base,
    }


def config_from_json(doc):
    return ModelConfig(
        d_e=int(doc["d_e"]),
        levels=int(doc["levels"]),
        blocks_per_level=tuple(doc["blocks_per_level"]),
        heads=tuple(doc["heads"]),
        num_experts=int(doc["num_experts"]),
        active_experts=int(doc["active_experts"]),
        skip_depths=tuple(doc["skip_depths"]),
        horizon=int(doc["horizon"]),
        patch_len=int(doc["patch_len"]),
        fingerprint_rows=int(doc["fingerprint_rows"]),
        stochastic_depth_rate=float(doc["stochastic_depth_rate"]),
        rope_base=float(doc["rope_base"]),
    )


# ---------------------------------------------------------------------------
# parameters


def _parameter_shapes(cfg, lift_dim):
    """Ordered dict of every parameter name -> (shape, init kind)."""
    shapes = {}

    def affine(prefix, n_in, n_out, kind="normal"):
        shapes[f"{prefix}.W"] = ((n_in, n_out), kind)
        shapes[f"{prefix}.b"] = ((n_out,), "zeros")

    def block(prefix, d):
        shapes[f"{prefix}.rms1.g"] = ((d,), "ones")
        shapes[f"{prefix}.rms2.g"] = ((d,), "ones")
        shapes[f"{prefix}.rms3.g"] = ((d,), "ones")
        for attn in ("va", "ta"):
            affine(f"{prefix}.{attn}.q", d, d)
            affine(f"{prefix}.{attn}.k", d, d)
            affine(f"{prefix}.{attn}.v", d, d)
            affine(f"{prefix}.{attn}.o", d, d, kind="zeros")
        shapes[f"{prefix}.moe.Wr"] = ((d, cfg.num_experts), "normal")
        shapes[f"{prefix}.moe.br"] = ((cfg.num_experts,), "zeros")
        shapes[f"{prefix}.moe.Wg"] = ((d, 1), "normal")
        shapes[f"{prefix}.moe.bg"] = ((1,), "zeros")
        h = max(16, d // 2)
        for i in range(cfg.num_experts):
            affine(f"{prefix}.moe.E{i}.in", d, h)
            affine(f"{prefix}.moe.E{i}.out", h, d)
        affine(f"{prefix}.moe.S.in", d, d)
        affine(f"{prefix}.moe.S.out", d, d)

    affine("embed", lift_dim, cfg.d_e)
    for lv in range(1, cfg.levels + 1):
        d = cfg.level_width(lv)
        for b in range(cfg.blocks_per_level[lv - 1]):
            block(f"enc.L{lv}.B{b}", d)
        if lv < cfg.levels:
            affine(f"merge.L{lv}", 2 * d, 2 * d)
    d_top = cfg.level_width(cfg.levels)
    affine("bottleneck", d_top, d_top)
    for lv in range(cfg.levels - 1, 0, -1):
        d = cfg.level_width(lv)
        affine(f"expand.L{lv}", 2 * d, 2 * d)
        for b in range(cfg.skip_depths[lv - 1]):
            p = f"skip.L{lv}.B{b}"
            shapes[f"{p}.conv.k"] = ((d, 7), "normal")
            shapes[f"{p}.ln.g"] = ((d,), "ones")
            shapes[f"{p}.ln.b"] = ((d,), "zeros")
            affine(f"{p}.pw1", d, 4 * d)
            affine(f"{p}.pw2", 4 * d, d)
            shapes[f"{p}.scale.g"] = ((d,), "layerscale")
        for b in range(cfg.blocks_per_level[lv - 1]):
            block(f"dec.L{lv}.B{b}", d)
    total = (2**cfg.levels - 1) * cfg.d_e
    shapes["fuse.W"] = ((cfg.d_e, total), "normal")
    shapes["head.W"] = ((cfg.horizon, cfg.d_e + cfg.fingerprint_rows), "normal")
    shapes["head.b"] = ((cfg.horizon, 1), "zeros")
    return shapes


def _trunc_normal(rng, shape, std=0.02):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class Model:
    """Config, lift dictionary, and named float64 parameter tensors."""

    def __init__(self, config, lift_config, params):
        self.config = config
        self.lift_config = lift_config
        self.params = params

    def parameter_count(self):
        return sum(int(np.prod(t.data.shape)) for t in self.params.values())


def build_model(config=None, lift_config=None, seed=0):
    config = ModelConfig() if config is None else config
    if lift_config is None:
        lift_config = features.build_lift_config(patch_len=config.patch_len, seed=seed)
    if lift_config.patch_len != config.patch_len:
        raise DataError("lift patch length must match model patch length")
    rng = make_rng(seed, "init")
    params = {}
    for name, (shape, kind) in _parameter_shapes(config, lift_config.dim).items():
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "layerscale":
            arr = np.full(shape, 1e-6)
        else:
            arr = _trunc_normal(rng, shape)
        params[name] = tensor.Tensor(arr, requires_grad=True)
    return Model(config, lift_config, params)


# ---------------------------------------------------------------------------
# building blocks (all operate on Tensors shaped (B, S, V, d))


def _affine(x, params, prefix):
    # flatten leading axes so the matmul is one large GEMM, not a stack of
    # tiny per-token ones
    shape = x.data.shape
    if x.data.ndim > 2:
        x = tensor.reshape(x, (-1, shape[-1]))
    y = tensor.add(tensor.matmul(x, params[f"{prefix}.W"]), params[f"{prefix}.b"])
    if len(shape) > 2:
        y = tensor.reshape(y, shape[:-1] + (y.data.shape[-1],))
    return y


def _rmsnorm(x, gain):
    return tensor.mul(tensor.rms_normalize(x), gain)


def rope_angles(n_pos, d_head, base):
    """(n_pos, d_head) cos/sin tables; angle i uses base^(-2i/d_head)."""
    if d_head % 2:
        raise DataError("rotary positions require an even head dimension")
    half = d_head // 2
    inv = float(base) ** (-2.0 * np.arange(half) / d_head)
    ang = np.arange(n_pos)[:, None] * inv[None, :]
    full = np.concatenate([ang, ang], axis=1)
    return np.cos(full), np.sin(full)


def rope_rotate(x, positions, base):
    """Rotate head vectors by their positions (numpy, for direct use in tests).

    Feature i pairs with feature i + d/2; both turn by position * base^(-2i/d).
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    cos, sin = rope_angles(int(np.max(positions)) + 1, d, base)
    c = cos[positions]
    s = sin[positions]
    half = d // 2
    rot = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return x * c + rot * s


def _rope_tensor(x, cos_c, sin_c):
    # x: (..., S, d_head); cos/sin constants broadcast over leading axes
    d = x.data.shape[-1]
    half = d // 2
    lo = tensor.slice_axis(x, -1, 0, half)
    hi = tensor.slice_axis(x, -1, half, d)
    rot = tensor.concat([tensor.neg(hi), lo], axis=-1)
    return tensor.add(tensor.mul(x, cos_c), tensor.mul(rot, sin_c))


def _heads_split(x, n_heads):
    # (B, S, V, d) -> (B, S, V, h, dh)
    B, S, V, d = x.data.shape
    return tensor.reshape(x, (B, S, V, n_heads, d // n_heads))


def _attention(x, params, prefix, n_heads, axis, rope=None):
    """Axial multi-head attention across one of the two token axes.

    axis="var" attends V tokens per (sample, patch); axis="time" attends S
    tokens per (sample, variable) with rotary positions on q and k. Score
    matrices are V x V or S x S respectively, never (S*V)^2.
    """
    B, S, V, d = x.data.shape
    q = _heads_split(_affine(x, params, f"{prefix}.q"), n_heads)
    k = _heads_split(_affine(x, params, f"{prefix}.k"), n_heads)
    v = _heads_split(_affine(x, params, f"{prefix}.v"), n_heads)
    if axis == "var":
        perm = (0, 1, 3, 2, 4)  # (B, S, h, V, dh)
    else:
        perm = (0, 2, 3, 1, 4)  # (B, V, h, S, dh)
    inverse = tuple(int(i) for i in np.argsort(perm))
    q, k, v = (tensor.permute(t, perm) for t in (q, k, v))
    if rope is not None:
        cos_c, sin_c = rope
        q = _rope_tensor(q, cos_c, sin_c)
        k = _rope_tensor(k, cos_c, sin_c)
    out = tensor.scaled_dot_attention(q, k, v)
    out = tensor.permute(out, inverse)
    out = tensor.reshape(out, (B, S, V, d))
    return _affine(out, params, f"{prefix}.o")


@dataclass(frozen=True, eq=False)
class MoeRouterOutput:
    scores: np.ndarray  # (n_tokens, M) softmax over specialists
    indices: np.ndarray  # (n_tokens, K) selected experts
    weights: np.ndarray  # (n_tokens, K) selected scores, unrenormalized
    shared_gate: np.ndarray  # (n_tokens,) in (0, 1)


def moe_forward(flat, params, prefix, num_experts, active, collect=None):
    """Sparse expert mixture over flat (n, d) tokens.

    Selected specialist weights are raw softmax scores (no renormalization);
    the shared expert is always on, scaled by a sigmoid gate. Routing
    fractions f_i (top-K membership) and mean scores r_i feed the balance
    objective; only r_i carries gradient.
    """
    n, d = flat.data.shape
    logits = tensor.add(tensor.matmul(flat, params[f"{prefix}.Wr"]), params[f"{prefix}.br"])
    scores = tensor.softmax(logits, axis=-1)
    top_vals, top_idx = tensor.gather_topk(scores, active)
    gate = tensor.sigmoid(
        tensor.add(tensor.matmul(flat, params[f"{prefix}.Wg"]), params[f"{prefix}.bg"])
    )
    shared = _affine(tensor.gelu(_affine(flat, params, f"{prefix}.S.in")), params, f"{prefix}.S.out")
    out = tensor.mul(shared, gate)
    flat_w = tensor.reshape(top_vals, (n * active,))
    flat_idx = top_idx.reshape(-1)
    token_of = np.repeat(np.arange(n), active)
    for e in range(num_experts):
        mask = flat_idx == e
        if not np.any(mask):
            continue
        rows = np.nonzero(mask)[0]
        toks = tensor.take_rows(flat, token_of[rows])
        y = _affine(tensor.gelu(_affine(toks, params, f"{prefix}.E{e}.in")), params, f"{prefix}.E{e}.out")
        w = tensor.take_rows(flat_w, rows)
        out = tensor.add(
            out, tensor.scatter_weighted_sum(y, w, token_of[rows], n)
        )
    f_i = np.bincount(flat_idx, minlength=num_experts) / n
    # counts sum to K*n exactly; absorb division rounding into the largest
    # entry so the reported fractions sum to exactly K in floating point
    for _ in range(4):
        residual = float(active) - float(np.sum(f_i))
        if residual == 0.0:
            break
        f_i[int(np.argmax(f_i))] += residual
    r_i = tensor.mean_over_axis(scores, axis=0)
    router = MoeRouterOutput(
        scores=scores.data.copy(),
        indices=top_idx.copy(),
        weights=top_vals.data.copy(),
        shared_gate=gate.data.reshape(-1).copy(),
    )
    if collect is not None:
        collect.append({"prefix": prefix, "f": f_i, "r": r_i})
    return out, router


def block_forward(u, params, prefix, cfg, level, rope, collect=None):
    """Pre-normalized residual block: variable attention, temporal attention
    with rotary positions, then the expert mixture."""
    n_heads = cfg.heads[level - 1]
    h = tensor.add(
        _attention(_rmsnorm(u, params[f"{prefix}.rms1.g"]), params, f"{prefix}.va", n_heads, "var"),
        u,
    )
    hb = tensor.add(
        _attention(
            _rmsnorm(h, params[f"{prefix}.rms2.g"]), params, f"{prefix}.ta", n_heads, "time", rope=rope
        ),
        h,
    )
    B, S, V, d = hb.data.shape
    flat = tensor.reshape(_rmsnorm(hb, params[f"{prefix}.rms3.g"]), (B * S * V, d))
    mixed, _ = moe_forward(
        flat, params, f"{prefix}.moe", cfg.num_experts, cfg.active_experts, collect=collect
    )
    return tensor.add(tensor.reshape(mixed, (B, S, V, d)), hb)


def patch_merge(x, params, prefix):
    """(B, S, V, d) -> (B, S/2, V, 2d): pair concat then affine."""
    B, S, V, d = x.data.shape
    if S % 2:
        raise DataError("patch merge requires an even number of patches")
    even = tensor.slice_axis(x, 1, 0, S, 2)
    odd = tensor.slice_axis(x, 1, 1, S, 2)
    return _affine(tensor.concat([even, odd], axis=-1), params, prefix)


def patch_expand(x, params, prefix):
    """(B, S, V, d) -> (B, 2S, V, d/2): affine then split features in two."""
    B, S, V, d = x.data.shape
    if d % 2:
        raise DataError("patch expand requires an even feature width")
    y = _affine(x, params, prefix)
    y = tensor.reshape(y, (B, S, V, 2, d // 2))
    y = tensor.permute(y, (0, 1, 3, 2, 4))
    return tensor.reshape(y, (B, 2 * S, V, d // 2))


def skip_block(x, params, prefix, depth, rate, training=False, rng=None):
    """ConvNeXt-style refinement of an encoder state before decoder fusion.

    Each repeat: depthwise temporal conv (kernel 7), layer normalization,
    4x pointwise expansion, GELU, contraction, tiny learnable per-channel
    scale, optional stochastic depth, residual add.
    """
    out = x
    for b in range(depth):
        p = f"{prefix}.B{b}"
        y = tensor.depthwise_conv1d(out, params[f"{p}.conv.k"])
        y = tensor.add(
            tensor.mul(tensor.layer_normalize(y), params[f"{p}.ln.g"]), params[f"{p}.ln.b"]
        )
        y = _affine(tensor.gelu(_affine(y, params, f"{p}.pw1")), params, f"{p}.pw2")
        y = tensor.mul(y, params[f"{p}.scale.g"])
        if training and rng is not None and rate > 0:
            keep = (rng.random(size=(x.data.shape[0], 1, 1, 1)) >= rate).astype(np.float64)
            y = tensor.mul(y, tensor.constant(keep))
        out = tensor.add(out, y)
    return out


def readout(decoder_levels, valid_lengths, fingerprints, params):
    """Pool each decoder level over time, fuse, condition on the fingerprint.

    decoder_levels: list over levels 1..L of (B, S_l, V, d_l); padded patch
    positions (beyond each valid length) are excluded from the mean.
    Output: (B, H, V).
    """
    pooled = []
    for x, n_valid in zip(decoder_levels, valid_lengths):
        sliced = tensor.slice_axis(x, 1, 0, n_valid)
        pooled.append(tensor.mean_over_axis(sliced, axis=1))  # (B, V, d_l)
    cat = tensor.concat(pooled, axis=-1)  # (B, V, sum d_l)
    uni = tensor.matmul(cat, tensor.permute(params["fuse.W"], (1, 0)))  # (B, V, d_e)
    uni = tensor.permute(uni, (0, 2, 1))  # (B, d_e, V)
    feat = tensor.concat([uni, fingerprints], axis=1)  # (B, d_e + C, V)
    return tensor.add(tensor.matmul(params["head.W"], feat), params["head.b"])


# ---------------------------------------------------------------------------
# full forward


def embed_inputs(model, X):
    """Numpy front end: patchify, lift, fingerprint one (T, V) context."""
    cfg = model.config
    grid = features.patchify(np.asarray(X, dtype=np.float64), cfg.patch_len)
    lifted = features.lift_grid(grid, model.lift_config).transpose(0, 2, 1)  # (S, V, d_p)
    fp = features.scattering_fingerprint(np.asarray(X, dtype=np.float64)).values
    return lifted, fp


def forward_embedded(model, lifted, fingerprints, training=False, rng=None, collect=None):
    """Graph forward over pre-lifted inputs.

    lifted: Tensor or array (B, S, V, d_p); fingerprints: (B, C, V).
    Returns a (B, H, V) Tensor.
    """
    cfg = model.config
    params = model.params
    x = lifted if isinstance(lifted, tensor.Tensor) else tensor.constant(lifted)
    fps = (
        fingerprints
        if isinstance(fingerprints, tensor.Tensor)
        else tensor.constant(fingerprints)
    )
    B, S_real, V, _ = x.data.shape
    x = _affine(x, params, "embed")
    step = 2 ** (cfg.levels - 1)
    S_pad = -(-S_real // step) * step
    if S_pad != S_real:
        last = tensor.slice_axis(x, 1, S_real - 1, S_real)
        reps = [x] + [last] * (S_pad - S_real)
        x = tensor.concat(reps, axis=1)
    valid = [-(-S_real // 2 ** (lv - 1)) for lv in range(1, cfg.levels + 1)]
    rope_tables = {}

    def rope_for(level, n_pos):
        if level not in rope_tables:
            d_head = cfg.level_width(level) // cfg.heads[level - 1]
            cos, sin = rope_angles(n_pos, d_head, cfg.rope_base)
            rope_tables[level] = (tensor.constant(cos), tensor.constant(sin))
        return rope_tables[level]

    enc_states = []
    for lv in range(1, cfg.levels + 1):
        rope = rope_for(lv, x.data.shape[1])
        for b in range(cfg.blocks_per_level[lv - 1]):
            x = block_forward(x, params, f"enc.L{lv}.B{b}", cfg, lv, rope, collect=collect)
        enc_states.append(x)
        if lv < cfg.levels:
            x = patch_merge(x, params, f"merge.L{lv}")
    x = _affine(x, params, "bottleneck")
    decoder_levels = {cfg.levels: x}
    for lv in range(cfg.levels - 1, 0, -1):
        x = patch_expand(x, params, f"expand.L{lv}")
        skip = skip_block(
            enc_states[lv - 1],
            params,
            f"skip.L{lv}",
            cfg.skip_depths[lv - 1],
            cfg.stochastic_depth_rate,
            training=training,
            rng=rng,
        )
        x = tensor.add(x, skip)
        rope = rope_for(lv, x.data.shape[1])
        for b in range(cfg.blocks_per_level[lv - 1]):
            x = block_forward(x, params, f"dec.L{lv}.B{b}", cfg, lv, rope, collect=collect)
        decoder_levels[lv] = x
    ordered = [decoder_levels[lv] for lv in range(1, cfg.levels + 1)]
    return readout(ordered, valid, fps, params)


def forward(model, X, training=False, rng=None, collect=None):
    """(T, V) context -> (H, V) forecast."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < model.config.patch_len:
        raise DataError("context must be (T, V) with T >= patch length")
    lifted, fp = embed_inputs(model, X)
    out = forward_embedded(
        model, lifted[None], fp[None], training=training, rng=rng, collect=collect
    )
    return tensor.reshape(out, out.data.shape[1:])


def autoregressive_rollout(model, X, total_steps):
    """Forecast total_steps samples by sliding the context over own output."""
    if total_steps < 1:
        raise DataError("total_steps must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    T = X.shape[0]
    context = X.copy()
    outputs = []
    emitted = 0
    while emitted < total_steps:
        block = forward(model, context[-T:]).data
        outputs.append(block)
        context = np.concatenate([context, block], axis=0)
        emitted += block.shape[0]
    return np.concatenate(outputs, axis=0)[:total_steps]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, extra=None):
    """Single-container model serialization with a content checksum.

    Layout: magic, version, u64 header length, JSON header (config, lift,
    parameter manifest, optional extra), little-endian f64 payloads in
    manifest order, sha256 of all preceding bytes.
    """
    names = sorted(model.params)
    header = {
        "config": config_to_json(model.config),
        "lift": features.lift_config_to_json(model.lift_config),
        "manifest": [[n, list(model.params[n].data.shape)] for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)), blob]
    for n in names:
        parts.append(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())
    body = b"".join(parts)
    digest = hashlib.sha256(body).digest()
    atomic_write_bytes(path, body + digest)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 48 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"not a model checkpoint: {path}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"checkpoint checksum mismatch: {path}")
    version, hlen = struct.unpack_from("<IQ", body, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(body[16 : 16 + hlen].decode())
    cfg = config_from_json(header["config"])
    lift = features.lift_config_from_json(header["lift"])
    params = {}
    offset = 16 + hlen
    for name, shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[name] = tensor.Tensor(arr.copy(), requires_grad=True)
        offset += count * 8
    if offset != len(body):
        raise DataError("checkpoint payload length mismatch")
    expected = _parameter_shapes(cfg, lift.dim)
    if sorted(params) != sorted(expected) or any(
        params[n].data.shape != tuple(expected[n][0]) for n in expected
    ):
        # a config without its full parameter payload must fail, not re-init
        raise DataError(f"checkpoint parameters do not match its configuration: {path}")
    return Model(cfg, lift, params), header.get("extra", {})
