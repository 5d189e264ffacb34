"""Hierarchical encoder-decoder over a 4D token lattice.

Every block is pre-norm residual and uses one of two core operators:

* windowed multi-head self-attention over non-overlapping 4D windows, with
  the usual cyclic half-window shift on alternating layers (cross-boundary
  attention suppressed by additive -inf masks), or
* a gated selective state-space scan over a fixed 1D ordering of the token
  lattice.

Four configurations assign operators to blocks: MAMBA (all scan), ALTERNATE
(attention first, then strictly alternating through encoder and decoder),
AM (attention encoder / scan decoder), and MA (the reverse).

The encoder halves the spatial lattice and doubles feature width between
stages (patch merging); the decoder mirrors it with patch expansion.

Token ordering: token ``p * nt + t`` covers spatial patch ``p`` (the same
x-fastest linear index used by the patch grid and region masks) during
temporal slab ``t``.  A patch-major boolean mask therefore lines up with the
token matrix row for row.  Internally the token axis factorizes C-order as
a ``(z, y, x, t)`` lattice; the window tuple in the config stays (x, y, z, t)
and is reordered at the boundary.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .masking import REPLACE_LEARNED, MaskTensor, apply_mask
from .nifti import Volume4D

MAMBA = "MAMBA"
ALTERNATE = "ALTERNATE"
AM = "AM"
MA = "MA"
CONFIGURATIONS = (MAMBA, ALTERNATE, AM, MA)

ATT = "ATT"
SSM = "SSM"

SCAN_ORDERS = ("time_major", "space_major")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    stage_depths: tuple[int, ...] = (2, 2)
    window: tuple[int, int, int, int] = (4, 4, 4, 2)
    heads: int = 4
    ssm_state_dim: int = 8
    configuration: str = MAMBA
    patch_size: tuple[int, int, int] = (6, 6, 6)
    t_patch: int = 4
    mlp_ratio: float = 1.0
    ssm_expand: int = 2
    scan_order: str = "time_major"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.configuration not in CONFIGURATIONS:
            raise ValidationError(f"unknown configuration {self.configuration!r}")
        if self.embed_dim % self.heads:
            raise ValidationError("embed_dim must be divisible by heads")
        if self.embed_dim % 2:
            raise ValidationError("embed_dim must be even (merging doubles it)")
        if not self.stage_depths or any(d < 1 for d in self.stage_depths):
            raise ValidationError("stage_depths must be non-empty positive ints")
        if self.t_patch < 1:
            raise ValidationError("t_patch must be >= 1")
        if self.scan_order not in SCAN_ORDERS:
            raise ValidationError(f"unknown scan order {self.scan_order!r}")
        if self.ssm_expand < 1 or self.ssm_state_dim < 1:
            raise ValidationError("ssm_expand and ssm_state_dim must be >= 1")

    @property
    def n_stages(self) -> int:
        return len(self.stage_depths)

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * (2 ** stage)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# A configuration in the ballpark of the full-size model (~7.7M parameters);
# provided as a reference point, not exercised by the unit tests.
FULL_SCALE = ModelConfig(embed_dim=102, stage_depths=(2, 2, 2), heads=6,
                         window=(4, 4, 4, 2), ssm_state_dim=16)


def assign_operators(config: ModelConfig) -> list[str]:
    """Operator per block, encoder blocks first then decoder blocks."""
    n_enc = sum(config.stage_depths)
    n_dec = n_enc  # the decoder mirrors the encoder depth-for-depth
    kind = config.configuration
    if kind == MAMBA:
        return [SSM] * (n_enc + n_dec)
    if kind == ALTERNATE:
        return [ATT if i % 2 == 0 else SSM for i in range(n_enc + n_dec)]
    if kind == AM:
        return [ATT] * n_enc + [SSM] * n_dec
    return [SSM] * n_enc + [ATT] * n_dec  # MA


def _effective_window(window, dims) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Clamp the window to the lattice; shift only along axes with >1 window."""
    eff = tuple(min(w, d) for w, d in zip(window, dims))
    for w, d in zip(eff, dims):
        if d % w:
            raise ValidationError(f"window {eff} does not divide lattice {dims}")
    shifts = tuple(w // 2 if d > w else 0 for w, d in zip(eff, dims))
    return eff, shifts


def _window_partition_np(arr: np.ndarray, dims, eff) -> np.ndarray:
    d0, d1, d2, d3 = dims
    w0, w1, w2, w3 = eff
    trailing = arr.shape[4:]
    a = arr.reshape(d0 // w0, w0, d1 // w1, w1, d2 // w2, w2, d3 // w3, w3,
                    *trailing)
    a = a.transpose(0, 2, 4, 6, 1, 3, 5, 7, *range(8, a.ndim))
    return a.reshape(-1, w0 * w1 * w2 * w3, *trailing)


def _region_ids(dims, eff, shifts) -> np.ndarray:
    """Pre-shift window-region id per lattice site (Swin-style shift mask)."""
    ids = []
    for d, w, s in zip(dims, eff, shifts):
        axis = np.zeros(d, dtype=np.int64)
        if s > 0:
            axis[d - w:] = 1
            axis[d - s:] = 2
        ids.append(axis)
    rid = ids[0][:, None, None, None] * 27 + ids[1][None, :, None, None] * 9 \
        + ids[2][None, None, :, None] * 3 + ids[3][None, None, None, :]
    return rid


class HybridModel:
    """Parameter container plus forward passes for all four configurations."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(config.seed)
        self._cache: dict = {}
        self.capture_attention = False
        self.captured: list[dict] = []

        ops = assign_operators(config)
        depths = config.stage_depths
        self.enc_blocks: list[tuple[str, str, int, int]] = []  # (prefix, kind, stage, local)
        self.dec_blocks: list[tuple[str, str, int, int]] = []
        i = 0
        for stage, depth in enumerate(depths):
            for local in range(depth):
                prefix = f"enc{stage}.blk{local}"
                self._build_block(prefix, ops[i], config.stage_dim(stage))
                self.enc_blocks.append((prefix, ops[i], stage, local))
                i += 1
        for rev, depth in enumerate(reversed(depths)):
            stage = config.n_stages - 1 - rev
            for local in range(depth):
                prefix = f"dec{stage}.blk{local}"
                self._build_block(prefix, ops[i], config.stage_dim(stage))
                self.dec_blocks.append((prefix, ops[i], stage, local))
                i += 1

        d0 = config.embed_dim
        k = int(np.prod(config.patch_size)) * config.t_patch
        self._add_linear("embed", k, d0)
        self.params["mask_token"] = Tensor(
            self._rng.normal(0.0, 0.02, size=(d0,)).astype(np.float32),
            requires_grad=True, name="mask_token")
        for stage in range(config.n_stages - 1):
            d = config.stage_dim(stage)
            self._add_linear(f"merge{stage}", 8 * d, 2 * d)
            self._add_linear(f"expand{stage}", 2 * d, 8 * d)
        self._add_norm("head.norm", d0)
        self._add_linear("head", d0, k)
        d_top = config.stage_dim(config.n_stages - 1)
        self._add_norm("cls.norm", d_top)
        self._add_linear("cls", d_top, 1)

    # -- parameter construction ----------------------------------------------

    def _tensor(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr.astype(np.float32), requires_grad=True,
                                   name=name)

    def _add_linear(self, name: str, fan_in: int, fan_out: int) -> None:
        self._tensor(f"{name}.w", self._rng.normal(0.0, 0.02, size=(fan_in, fan_out)))
        self._tensor(f"{name}.b", np.zeros(fan_out))

    def _add_norm(self, name: str, dim: int) -> None:
        self._tensor(f"{name}.gamma", np.ones(dim))
        self._tensor(f"{name}.beta", np.zeros(dim))

    def _build_block(self, prefix: str, kind: str, dim: int) -> None:
        if kind == ATT:
            self._add_norm(f"{prefix}.ln1", dim)
            for proj in ("q", "k", "v", "proj"):
                self._add_linear(f"{prefix}.{proj}", dim, dim)
            self._add_norm(f"{prefix}.ln2", dim)
            hidden = max(1, int(round(self.config.mlp_ratio * dim)))
            self._add_linear(f"{prefix}.mlp1", dim, hidden)
            self._add_linear(f"{prefix}.mlp2", hidden, dim)
        elif kind == SSM:
            inner = self.config.ssm_expand * dim
            state = self.config.ssm_state_dim
            dt_rank = max(1, math.ceil(dim / 16))
            self._add_norm(f"{prefix}.ln", dim)
            self._add_linear(f"{prefix}.in", dim, 2 * inner)
            self._tensor(f"{prefix}.xproj.w",
                         self._rng.normal(0.0, 0.02, size=(inner, dt_rank + 2 * state)))
            self._tensor(f"{prefix}.dt.w",
                         self._rng.normal(0.0, 0.02, size=(dt_rank, inner)))
            dt = np.exp(self._rng.uniform(np.log(1e-3), np.log(1e-1), size=inner))
            self._tensor(f"{prefix}.dt.b", np.log(np.expm1(dt)))
            a_log = np.log(np.arange(1, state + 1, dtype=np.float64))
            self._tensor(f"{prefix}.a_log", np.tile(a_log, (inner, 1)))
            self._tensor(f"{prefix}.d_skip", np.ones(inner))
            self._add_linear(f"{prefix}.out", inner, dim)
        else:
            raise ValidationError(f"unknown block kind {kind!r}")

    def n_parameters(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def to_dtype(self, dtype) -> None:
        """Switch every parameter in place (float64 for gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None

    # -- small helpers --------------------------------------------------------

    def _lin(self, name: str, x: Tensor) -> Tensor:
        return ad.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    def lattice_dims(self, shape, n_t: int) -> tuple[int, int, int, int]:
        """Token lattice (z, y, x, t); C-order flattening gives row p*nt + t."""
        px, py, pz = self.config.patch_size
        x, y, z = shape
        if x % px or y % py or z % pz:
            raise ValidationError(f"volume shape {tuple(shape)} not divisible by "
                                  f"patches {self.config.patch_size}")
        if n_t % self.config.t_patch:
            raise ValidationError(f"{n_t} timepoints not divisible by t_patch="
                                  f"{self.config.t_patch}")
        return (z // pz, y // py, x // px, n_t // self.config.t_patch)

    def _lattice_window(self) -> tuple[int, int, int, int]:
        wx, wy, wz, wt = self.config.window
        return (wz, wy, wx, wt)

    def _patch_indices(self, shape, n_t: int) -> tuple[np.ndarray, np.ndarray]:
        """[N, voxels-per-token] flat voxel index per token (+ inverse), cached."""
        key = ("patch", tuple(shape), n_t)
        if key not in self._cache:
            px, py, pz = self.config.patch_size
            pt = self.config.t_patch
            x, y, z = shape
            nz, ny, nx, nt = self.lattice_dims(shape, n_t)
            idx = np.arange(x * y * z * n_t, dtype=np.int64).reshape(x, y, z, n_t)
            idx = idx.reshape(nx, px, ny, py, nz, pz, nt, pt)
            # token axes (z, y, x, t), then within-patch voxel axes (x, y, z, t)
            idx = idx.transpose(4, 2, 0, 6, 1, 3, 5, 7)
            flat = np.ascontiguousarray(
                idx.reshape(nx * ny * nz * nt, px * py * pz * pt))
            self._cache[key] = (flat, np.argsort(flat.reshape(-1)))
        return self._cache[key]

    def _scan_permutation(self, dims) -> tuple[np.ndarray, np.ndarray] | None:
        """Token order for the SSM scan; None keeps the stored order.

        Stored order is already "time_major": t fastest, then x, y, z.
        "space_major" visits each temporal slab in full (x fastest) before
        moving to the next one.
        """
        if self.config.scan_order == "time_major":
            return None
        key = ("scan", dims)
        if key not in self._cache:
            idx = np.arange(int(np.prod(dims)), dtype=np.int64).reshape(dims)
            perm = idx.transpose(3, 0, 1, 2).reshape(-1)
            self._cache[key] = (perm, np.argsort(perm))
        return self._cache[key]

    # -- core blocks -----------------------------------------------------------

    def _attention_mask(self, dims, eff, shifts) -> np.ndarray | None:
        if not any(shifts):
            return None
        key = ("amask", dims, eff, shifts)
        if key not in self._cache:
            rid = _region_ids(dims, eff, shifts)
            rid = np.roll(rid, tuple(-s for s in shifts), axis=(0, 1, 2, 3))
            rid = _window_partition_np(rid[..., None], dims, eff)[..., 0]
            neq = rid[:, :, None] != rid[:, None, :]
            bias = np.where(neq, -np.inf, 0.0).astype(np.float32)
            self._cache[key] = bias[:, None, :, :]  # head axis
        return self._cache[key]

    def _window_attention(self, x: Tensor, dims, prefix: str, shift: bool) -> Tensor:
        cfg = self.config
        d = x.shape[-1]
        heads = cfg.heads
        dh = d // heads
        eff, shifts = _effective_window(self._lattice_window(), dims)
        if not shift:
            shifts = (0, 0, 0, 0)
        d0, d1, d2, d3 = dims
        w0, w1, w2, w3 = eff
        wsz = w0 * w1 * w2 * w3
        n_windows = (d0 // w0) * (d1 // w1) * (d2 // w2) * (d3 // w3)

        h = self._norm(f"{prefix}.ln1", x)
        q = self._lin(f"{prefix}.q", h)
        k = self._lin(f"{prefix}.k", h)
        v = self._lin(f"{prefix}.v", h)

        def to_windows(t: Tensor) -> Tensor:
            t = ad.reshape(t, (*dims, d))
            if any(shifts):
                t = ad.roll(t, tuple(-s for s in shifts), (0, 1, 2, 3))
            t = ad.reshape(t, (d0 // w0, w0, d1 // w1, w1, d2 // w2, w2,
                               d3 // w3, w3, d))
            t = ad.transpose(t, (0, 2, 4, 6, 1, 3, 5, 7, 8))
            t = ad.reshape(t, (n_windows, wsz, heads, dh))
            return ad.transpose(t, (0, 2, 1, 3))  # [nW, heads, wsz, dh]

        qw, kw, vw = to_windows(q), to_windows(k), to_windows(v)
        attn = ad.mul(ad.matmul(qw, ad.transpose(kw, (0, 1, 3, 2))),
                      1.0 / math.sqrt(dh))
        bias = self._attention_mask(dims, eff, shifts)
        if bias is not None:
            attn = ad.add(attn, Tensor(bias.astype(x.dtype)))
        weights = ad.softmax(attn, axis=-1)
        if self.capture_attention:
            self.captured.append({
                "prefix": prefix, "dims": dims, "window": eff, "shifts": shifts,
                "weights": weights.data.copy(),
            })
        out = ad.matmul(weights, vw)  # [nW, heads, wsz, dh]
        out = ad.transpose(out, (0, 2, 1, 3))
        out = ad.reshape(out, (d0 // w0, d1 // w1, d2 // w2, d3 // w3,
                               w0, w1, w2, w3, d))
        out = ad.transpose(out, (0, 4, 1, 5, 2, 6, 3, 7, 8))
        out = ad.reshape(out, (*dims, d))
        if any(shifts):
            out = ad.roll(out, shifts, (0, 1, 2, 3))
        out = ad.reshape(out, (d0 * d1 * d2 * d3, d))
        x = ad.add(x, self._lin(f"{prefix}.proj", out))

        h2 = self._norm(f"{prefix}.ln2", x)
        h2 = ad.gelu(self._lin(f"{prefix}.mlp1", h2))
        return ad.add(x, self._lin(f"{prefix}.mlp2", h2))

    def _mamba(self, x: Tensor, dims, prefix: str) -> Tensor:
        state = self.config.ssm_state_dim
        h = self._norm(f"{prefix}.ln", x)

        perm = self._scan_permutation(dims)
        if perm is not None:
            h = ad.take_rows(h, perm[0])

        xu_z = self._lin(f"{prefix}.in", h)  # [L, 2*inner]
        inner = xu_z.shape[-1] // 2
        seq = xu_z.shape[0]
        both = ad.transpose(ad.reshape(xu_z, (seq, 2, inner)), (1, 0, 2))
        u = ad.reshape(ad.take_rows(both, [0]), (seq, inner))
        z = ad.reshape(ad.take_rows(both, [1]), (seq, inner))

        proj = ad.matmul(u, self.params[f"{prefix}.xproj.w"])  # [L, rank + 2S]
        dt_rank = proj.shape[-1] - 2 * state
        pt = ad.transpose(proj, (1, 0))  # [rank + 2S, L]
        dt_in = ad.transpose(ad.take_rows(pt, np.arange(dt_rank)), (1, 0))
        b_in = ad.transpose(ad.take_rows(pt, np.arange(dt_rank, dt_rank + state)),
                            (1, 0))
        c_in = ad.transpose(ad.take_rows(pt, np.arange(dt_rank + state,
                                                       dt_rank + 2 * state)), (1, 0))
        delta = ad.softplus(ad.add(ad.matmul(dt_in, self.params[f"{prefix}.dt.w"]),
                                   self.params[f"{prefix}.dt.b"]))
        a = ad.mul(ad.exp(self.params[f"{prefix}.a_log"]), -1.0)
        y = ad.selective_scan(u, delta, a, b_in, c_in, self.params[f"{prefix}.d_skip"])
        y = ad.mul(y, ad.silu(z))
        y = self._lin(f"{prefix}.out", y)

        if perm is not None:
            y = ad.take_rows(y, perm[1])
        return ad.add(x, y)

    def _run_block(self, x: Tensor, dims, prefix: str, kind: str, local: int) -> Tensor:
        if kind == ATT:
            return self._window_attention(x, dims, prefix, shift=bool(local % 2))
        return self._mamba(x, dims, prefix)

    def _merge(self, x: Tensor, dims, stage: int) -> tuple[Tensor, tuple]:
        nz, ny, nx, nt = dims
        if nx % 2 or ny % 2 or nz % 2:
            raise ValidationError(f"cannot merge odd lattice {dims}")
        d = x.shape[-1]
        t = ad.reshape(x, (nz // 2, 2, ny // 2, 2, nx // 2, 2, nt, d))
        t = ad.transpose(t, (0, 2, 4, 6, 1, 3, 5, 7))
        t = ad.reshape(t, ((nz // 2) * (ny // 2) * (nx // 2) * nt, 8 * d))
        return self._lin(f"merge{stage}", t), (nz // 2, ny // 2, nx // 2, nt)

    def _expand(self, x: Tensor, dims, stage: int) -> tuple[Tensor, tuple]:
        nz, ny, nx, nt = dims
        d2 = x.shape[-1]
        d = d2 // 2
        t = self._lin(f"expand{stage}", x)  # [N, 8*d]
        t = ad.reshape(t, (nz, ny, nx, nt, 2, 2, 2, d))
        t = ad.transpose(t, (0, 4, 1, 5, 2, 6, 3, 7))
        t = ad.reshape(t, (nz * 2 * ny * 2 * nx * 2 * nt, d))
        return t, (2 * nz, 2 * ny, 2 * nx, nt)

    # -- embedding and heads ---------------------------------------------------

    def _as_flat_input(self, vol) -> tuple[Tensor, tuple, int]:
        if isinstance(vol, Volume4D):
            data = vol.data
        elif isinstance(vol, Tensor):
            data = vol.data
        else:
            data = np.asarray(vol)
        if data.ndim != 4:
            raise ValidationError("model input must be a 4D volume")
        shape, n_t = data.shape[:3], data.shape[3]
        if isinstance(vol, Tensor):
            flat = ad.reshape(vol, (data.size,))
        else:
            flat = Tensor(np.ascontiguousarray(data).reshape(-1))
        return flat, shape, n_t

    def patch_embed(self, vol) -> tuple[Tensor, tuple]:
        """Voxel blocks -> D-dim tokens; row p*nt + t covers patch p, slab t."""
        flat, shape, n_t = self._as_flat_input(vol)
        idx, _ = self._patch_indices(shape, n_t)
        blocks = ad.take_rows(flat, idx)  # [N, k]
        return self._lin("embed", blocks), self.lattice_dims(shape, n_t)

    def _mask_flat(self, mask: MaskTensor, dims) -> np.ndarray:
        nz, ny, nx, nt = dims
        if mask.n_patches != nx * ny * nz or mask.t_patches != nt:
            raise ValidationError(
                f"mask lattice {mask.mask.shape} does not match token lattice {dims}")
        return mask.flat()  # patch-major == token order

    def encode(self, tokens: Tensor, dims) -> tuple[Tensor, tuple]:
        i = 0
        for stage, depth in enumerate(self.config.stage_depths):
            for _ in range(depth):
                prefix, kind, _, local = self.enc_blocks[i]
                tokens = self._run_block(tokens, dims, prefix, kind, local)
                i += 1
            if stage < self.config.n_stages - 1:
                tokens, dims = self._merge(tokens, dims, stage)
        return tokens, dims

    def decode(self, tokens: Tensor, dims) -> tuple[Tensor, tuple]:
        i = 0
        for rev, depth in enumerate(reversed(self.config.stage_depths)):
            stage = self.config.n_stages - 1 - rev
            for _ in range(depth):
                prefix, kind, _, local = self.dec_blocks[i]
                tokens = self._run_block(tokens, dims, prefix, kind, local)
                i += 1
            if stage > 0:
                tokens, dims = self._expand(tokens, dims, stage - 1)
        return tokens, dims

    def forward_pretrain(self, vol, mask: MaskTensor) -> Tensor:
        """Masked volume in, reconstructed volume (same shape) out."""
        flat, shape, n_t = self._as_flat_input(vol)
        idx, inv = self._patch_indices(shape, n_t)
        tokens = self._lin("embed", ad.take_rows(flat, idx))
        dims = self.lattice_dims(shape, n_t)

        m = self._mask_flat(mask, dims)
        tokens, _ = apply_mask(tokens, m, REPLACE_LEARNED,
                               mask_token=self.params["mask_token"])

        tokens, dims2 = self.encode(tokens, dims)
        tokens, dims3 = self.decode(tokens, dims2)
        if dims3 != dims:
            raise ValidationError(f"decoder returned lattice {dims3}, expected {dims}")

        tokens = self._norm("head.norm", tokens)
        recon = self._lin("head", tokens)  # [N, k]
        n_vox = int(np.prod(shape)) * n_t
        out = ad.take_rows(ad.reshape(recon, (n_vox,)), inv)
        return ad.reshape(out, (*shape, n_t))

    def forward_classify(self, vol) -> Tensor:
        """Encoder + mean pool + linear head -> scalar logit."""
        tokens, dims = self.patch_embed(vol)
        tokens, _ = self.encode(tokens, dims)
        pooled = ad.tmean(self._norm("cls.norm", tokens), axis=0)  # [D_top]
        logit = ad.add(ad.matmul(ad.reshape(pooled, (1, pooled.shape[0])),
                                 self.params["cls.w"]),
                       self.params["cls.b"])
        return ad.reshape(logit, ())
