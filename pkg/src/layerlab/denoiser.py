"""Unified layer-conditional denoiser.

A single transformer denoises any subset of {composite, background,
foreground-with-effects} images given any subset of {text, mask,
background, foreground} conditions. Tokens from all images and the caption
are concatenated into one sequence; learned type and input/output
embeddings carry each token's role, and 2-D sinusoidal positions restart
per image so the forward pass does not depend on how condition images are
ordered. Training regresses a flow-matching velocity (or, optionally, the
noise under a variance-preserving cosine schedule) with the loss restricted
to target tokens.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, Tensor, linear_warmup_schedule, warmup_cosine_schedule
from .imaging import Mask, RgbaImage, mask_to_image
from .scenes import LayerTriplet

SCHEDULES = ("linear_flow", "vp")

ROLES = ("text", "mask", "bg", "fg", "fg_ve", "comp")
ROLE_INDEX = {r: i for i, r in enumerate(ROLES)}
IO_INPUT, IO_OUTPUT = 0, 1

# Canonical internal ordering of condition images inside the sequence.
_CONDITION_ORDER = ("mask", "bg", "fg")

PAD_ID = 0


class ModelError(Exception):
    pass


class TrainingDivergedError(ModelError):
    pass


@dataclass(frozen=True)
class ModeSpec:
    name: str
    conditions: tuple[str, ...]
    targets: tuple[str, ...]


# The three generation modes and nothing else is constructible through this table.
MODES = {
    "fg_gen": ModeSpec("fg_gen", ("text", "mask", "bg"), ("comp", "fg_ve")),
    "bg_gen": ModeSpec("bg_gen", ("text", "mask", "fg"), ("comp", "bg", "fg_ve")),
    "text2all": ModeSpec("text2all", ("text", "mask"), ("comp", "bg", "fg_ve")),
}


def get_mode(name: str) -> ModeSpec:
    if name not in MODES:
        raise ModelError(f"unknown mode {name!r}; valid: {sorted(MODES)}")
    return MODES[name]


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    depth: int = 4
    heads: int = 4
    patch: int = 8
    image_size: int = 64
    vocab: int = 256
    text_len: int = 16
    schedule: str = "linear_flow"
    sample_steps: int = 50
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ModelError("image size must be divisible by the patch size")
        if self.dim % self.heads != 0:
            raise ModelError("heads must divide the model dim")
        if self.dim % 4 != 0:
            raise ModelError("model dim must be divisible by 4")
        if self.schedule not in SCHEDULES:
            raise ModelError(f"unknown schedule {self.schedule!r}")

    @property
    def patches_per_image(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return 4 * self.patch * self.patch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, L, dim)
    loss_mask: np.ndarray  # (L,) bool, True exactly on target patch tokens
    segment_map: list[dict]  # per token: role, io, and patch coords or text index


def tokenize_text(caption: str, cfg: ModelConfig) -> np.ndarray:
    """Lowercase word split hashed into vocabulary buckets, padded/truncated.

    Stable across runs and platforms (blake2b, not the salted builtin hash).
    """
    words = caption.lower().split()
    ids = []
    for word in words[: cfg.text_len]:
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        ids.append(1 + int.from_bytes(digest, "little") % (cfg.vocab - 1))
    ids.extend([PAD_ID] * (cfg.text_len - len(ids)))
    return np.array(ids, dtype=np.int64)


def patchify(img: RgbaImage | np.ndarray, p: int) -> np.ndarray:
    """(H, W, 4) -> (H/p * W/p, 4p^2); lossless, row-major patches, C-order
    (p, p, 4) flattening inside each patch."""
    arr = img.data if isinstance(img, RgbaImage) else arr_check(img)
    h, w, _ = arr.shape
    if h % p or w % p:
        raise ModelError(f"image size {h}x{w} not divisible by patch {p}")
    arr = arr.reshape(h // p, p, w // p, p, 4).transpose(0, 2, 1, 3, 4)
    return arr.reshape((h // p) * (w // p), 4 * p * p)


def arr_check(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 4:
        raise ModelError(f"expected (H, W, 4), got {arr.shape}")
    return arr


def unpatchify(patches: np.ndarray, p: int, height: int, width: int) -> np.ndarray:
    n = (height // p) * (width // p)
    if patches.shape != (n, 4 * p * p):
        raise ModelError(f"expected ({n}, {4 * p * p}) patches, got {patches.shape}")
    arr = patches.reshape(height // p, width // p, p, p, 4).transpose(0, 2, 1, 3, 4)
    return arr.reshape(height, width, 4)


def sincos_position_2d(rows: int, cols: int, dim: int) -> np.ndarray:
    """Per-image 2-D sinusoidal grid embedding, (rows*cols, dim)."""
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.mgrid[0:rows, 0:cols]
    out = np.concatenate(
        [
            np.sin(ys.reshape(-1, 1) * omega),
            np.cos(ys.reshape(-1, 1) * omega),
            np.sin(xs.reshape(-1, 1) * omega),
            np.cos(xs.reshape(-1, 1) * omega),
        ],
        axis=1,
    )
    if out.shape[1] < dim:
        out = np.concatenate([out, np.zeros((out.shape[0], dim - out.shape[1]))], axis=1)
    return out


def sincos_timestep(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of t in [0, 1], shape (..., dim)."""
    half = dim // 2
    omega = np.exp(np.linspace(0.0, np.log(1000.0), half))
    ang = np.asarray(t)[..., None] * omega
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def noise_interpolate(x0: np.ndarray, eps: np.ndarray, t: float, schedule: str):
    """Return (x_t, regression target) for one schedule.

    linear_flow: x_t = (1-t) x0 + t eps, target = eps - x0 (velocity).
    vp:          x_t = sqrt(abar) x0 + sqrt(1-abar) eps with
                 abar = cos^2(pi t / 2), target = eps.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ModelError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise ModelError("t must lie in [0, 1]")
    while t_arr.ndim < x0.ndim:
        t_arr = t_arr[..., None]
    if schedule == "linear_flow":
        xt = (1.0 - t_arr) * x0 + t_arr * eps
        return xt, eps - x0
    if schedule == "vp":
        abar = np.cos(np.pi * t_arr / 2.0) ** 2
        xt = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
        return xt, eps
    raise ModelError(f"unknown schedule {schedule!r}")


def _init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, r = cfg.dim, cfg.mlp_ratio

    def w(*shape, scale=0.02):
        return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params = {
        "text_emb": w(cfg.vocab, d),
        "type_emb": w(len(ROLES), d),
        "io_emb": w(2, d),
        "w_in": w(cfg.patch_dim, d),
        "b_in": zeros(d),
        "t_w1": w(d, d),
        "t_b1": zeros(d),
        "t_w2": w(d, d),
        "t_b2": zeros(d),
        "final_mod_w": zeros(d, 2 * d),
        "final_mod_b": zeros(2 * d),
        "w_out": zeros(d, cfg.patch_dim),
        "b_out": zeros(cfg.patch_dim),
    }
    for i in range(cfg.depth):
        for nm in ("wq", "wk", "wv", "wo"):
            params[f"blk{i}.{nm}"] = w(d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            params[f"blk{i}.{nm}"] = zeros(d)
        params[f"blk{i}.mlp_w1"] = w(d, r * d)
        params[f"blk{i}.mlp_b1"] = zeros(r * d)
        params[f"blk{i}.mlp_w2"] = w(r * d, d)
        params[f"blk{i}.mlp_b2"] = zeros(d)
        # zero-init modulation: blocks are identity at initialization
        params[f"blk{i}.mod_w"] = zeros(d, 6 * d)
        params[f"blk{i}.mod_b"] = zeros(6 * d)
    return params


class LayerDenoiser:
    """Transformer over concatenated condition and target tokens."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict | None = None):
        self.cfg = cfg
        if params is None:
            self.params = _init_params(cfg, seed)
        else:
            self.params = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        side = cfg.image_size // cfg.patch
        self._pos_image = sincos_position_2d(side, side, cfg.dim)
        self._pos_text = sincos_position_2d(1, cfg.text_len, cfg.dim)

    # -- persistence --------------------------------------------------------

    def save(self, path):
        ad.save_checkpoint(self.params, path, extra={"model_config": self.cfg.to_dict()})

    @classmethod
    def load(cls, path) -> "LayerDenoiser":
        params, extra = ad.load_checkpoint(path)
        cfg = ModelConfig.from_dict(extra["model_config"])
        return cls(cfg, params=params)

    # -- sequence assembly --------------------------------------------------

    def _embed_image_tokens(self, patches: np.ndarray, role: str, io: int) -> Tensor:
        """patches (B, N, patch_dim) -> (B, N, dim) content + type + io + position."""
        p = self.params
        content = ad.matmul(Tensor(patches), p["w_in"]) + p["b_in"]
        tag = ad.getitem(p["type_emb"], ROLE_INDEX[role]) + ad.getitem(p["io_emb"], io)
        return content + tag + Tensor(self._pos_image)

    def _embed_text_tokens(self, ids: np.ndarray) -> Tensor:
        p = self.params
        content = ad.embedding_lookup(p["text_emb"], ids)
        tag = ad.getitem(p["type_emb"], ROLE_INDEX["text"]) + ad.getitem(p["io_emb"], IO_INPUT)
        return content + tag + Tensor(self._pos_text)

    def assemble(
        self,
        mode: ModeSpec,
        text_ids: np.ndarray,  # (B, text_len)
        cond_patches: dict[str, np.ndarray],  # role -> (B, N, patch_dim)
        noised_patches: dict[str, np.ndarray],  # role -> (B, N, patch_dim)
    ) -> tuple[Tensor, np.ndarray, list[dict]]:
        """Build the (B, L, dim) token tensor plus loss mask and segment map."""
        cond_roles = [r for r in _CONDITION_ORDER if r in mode.conditions]
        if set(cond_patches) != set(cond_roles):
            missing = set(cond_roles) - set(cond_patches)
            raise ModelError(f"mode {mode.name}: missing condition roles {sorted(missing)}")
        if set(noised_patches) != set(mode.targets):
            missing = set(mode.targets) - set(noised_patches)
            raise ModelError(f"mode {mode.name}: missing target roles {sorted(missing)}")
        pieces = [self._embed_text_tokens(text_ids)]
        segment = [
            {"role": "text", "io": "input", "index": i} for i in range(text_ids.shape[1])
        ]
        side = self.cfg.image_size // self.cfg.patch
        for role in cond_roles:
            pieces.append(self._embed_image_tokens(cond_patches[role], role, IO_INPUT))
            segment.extend(
                {"role": role, "io": "input", "patch": (i // side, i % side)}
                for i in range(self.cfg.patches_per_image)
            )
        for role in mode.targets:
            pieces.append(self._embed_image_tokens(noised_patches[role], role, IO_OUTPUT))
            segment.extend(
                {"role": role, "io": "output", "patch": (i // side, i % side)}
                for i in range(self.cfg.patches_per_image)
            )
        tokens = ad.concat(pieces, axis=1)
        loss_mask = np.array([s["io"] == "output" for s in segment], dtype=bool)
        return tokens, loss_mask, segment

    def build_sequence(
        self,
        mode: ModeSpec,
        sample: LayerTriplet,
        noised_targets: dict[str, np.ndarray],
        t: float,
        condition_order: tuple[str, ...] | None = None,
    ) -> TokenSequence:
        """Single-sample sequence assembly.

        ``condition_order`` may list the condition roles in any order; the
        internal layout is canonical, which is what makes the forward pass
        order-invariant.
        """
        if condition_order is not None and sorted(condition_order) != sorted(
            r for r in mode.conditions if r != "text"
        ):
            raise ModelError("condition_order must be a permutation of the mode's image conditions")
        del t  # timestep conditioning is injected per block, not per token
        cond = {
            role: patches[None]
            for role, patches in condition_patches(sample, mode, self.cfg.patch).items()
        }
        text_ids = tokenize_text(sample.captions.get("composite_text", ""), self.cfg)[None]
        noised = {role: arr[None] if arr.ndim == 2 else arr for role, arr in noised_targets.items()}
        tokens, loss_mask, segment = self.assemble(mode, text_ids, cond, noised)
        return TokenSequence(tokens=tokens, loss_mask=loss_mask, segment_map=segment)

    # -- transformer forward ------------------------------------------------

    def _timestep_embedding(self, t: np.ndarray) -> Tensor:
        p = self.params
        feats = Tensor(sincos_timestep(t, self.cfg.dim))  # (B, dim)
        h = ad.gelu(ad.matmul(feats, p["t_w1"]) + p["t_b1"])
        return ad.matmul(h, p["t_w2"]) + p["t_b2"]

    def _attention(self, h: Tensor, i: int) -> Tensor:
        p = self.params
        cfg = self.cfg
        b, length, d = h.shape
        heads, dh = cfg.heads, cfg.dim // cfg.heads
        q = ad.matmul(h, p[f"blk{i}.wq"]) + p[f"blk{i}.bq"]
        k = ad.matmul(h, p[f"blk{i}.wk"]) + p[f"blk{i}.bk"]
        v = ad.matmul(h, p[f"blk{i}.wv"]) + p[f"blk{i}.bv"]
        q = ad.transpose(ad.reshape(q, (b, length, heads, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (b, length, heads, dh)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (b, length, heads, dh)), (0, 2, 1, 3))
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        out = ad.matmul(attn, v)
        out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, length, d))
        return ad.matmul(out, p[f"blk{i}.wo"]) + p[f"blk{i}.bo"]

    def _mlp(self, h: Tensor, i: int) -> Tensor:
        p = self.params
        h = ad.gelu(ad.matmul(h, p[f"blk{i}.mlp_w1"]) + p[f"blk{i}.mlp_b1"])
        return ad.matmul(h, p[f"blk{i}.mlp_w2"]) + p[f"blk{i}.mlp_b2"]

    def forward(self, tokens: Tensor, t: np.ndarray) -> Tensor:
        """tokens (B, L, dim), t (B,) -> per-token patch predictions (B, L, patch_dim)."""
        p = self.params
        b = tokens.shape[0]
        d = self.cfg.dim
        c = self._timestep_embedding(np.asarray(t, dtype=np.float64))  # (B, d)
        x = tokens
        for i in range(self.cfg.depth):
            mod = ad.matmul(c, p[f"blk{i}.mod_w"]) + p[f"blk{i}.mod_b"]
            mod = ad.reshape(mod, (b, 1, 6, d))
            sh1, sc1, g1 = mod[:, :, 0, :], mod[:, :, 1, :], mod[:, :, 2, :]
            sh2, sc2, g2 = mod[:, :, 3, :], mod[:, :, 4, :], mod[:, :, 5, :]
            h = ad.layer_norm(x, axis=-1) * (1.0 + sc1) + sh1
            x = x + g1 * self._attention(h, i)
            h = ad.layer_norm(x, axis=-1) * (1.0 + sc2) + sh2
            x = x + g2 * self._mlp(h, i)
        mod = ad.matmul(c, p["final_mod_w"]) + p["final_mod_b"]
        mod = ad.reshape(mod, (b, 1, 2, d))
        x = ad.layer_norm(x, axis=-1) * (1.0 + mod[:, :, 1, :]) + mod[:, :, 0, :]
        return ad.matmul(x, p["w_out"]) + p["b_out"]


def condition_patches(sample: LayerTriplet, mode: ModeSpec, p: int) -> dict[str, np.ndarray]:
    """Clean condition image patches for a sample under a mode."""
    sources = {
        "mask": lambda: mask_to_image(sample.mask),
        "bg": lambda: sample.background,
        "fg": lambda: sample.fg_clean,
    }
    return {
        role: patchify(sources[role](), p)
        for role in _CONDITION_ORDER
        if role in mode.conditions
    }


def target_patches(sample: LayerTriplet, mode: ModeSpec, p: int) -> dict[str, np.ndarray]:
    sources = {"comp": sample.composite, "bg": sample.background, "fg_ve": sample.fg_ve}
    return {role: patchify(sources[role], p) for role in mode.targets}


def _batched_loss(
    model: LayerDenoiser,
    mode: ModeSpec,
    text_ids: np.ndarray,
    cond: dict[str, np.ndarray],
    clean: dict[str, np.ndarray],
    ts: np.ndarray,
    eps: dict[str, np.ndarray],
) -> Tensor:
    cfg = model.cfg
    noised, targets = {}, []
    for role in mode.targets:
        xt, tgt = noise_interpolate(clean[role], eps[role], ts, cfg.schedule)
        noised[role] = xt
        targets.append(tgt)
    tokens, loss_mask, _ = model.assemble(mode, text_ids, cond, noised)
    preds = model.forward(tokens, ts)
    n_cond = int((~loss_mask).sum())
    pred_targets = preds[:, n_cond:, :]
    target = np.concatenate(targets, axis=1)
    return ad.mse(pred_targets, target)


def training_loss(
    model: LayerDenoiser,
    mode: ModeSpec,
    sample: LayerTriplet,
    rng: np.random.Generator,
    t: float | None = None,
    eps: dict[str, np.ndarray] | None = None,
) -> Tensor:
    """Single-sample denoising loss; t and eps may be pinned for testing."""
    cfg = model.cfg
    text_ids = tokenize_text(sample.captions.get("composite_text", ""), cfg)[None]
    cond = {r: v[None] for r, v in condition_patches(sample, mode, cfg.patch).items()}
    clean = {r: v[None] for r, v in target_patches(sample, mode, cfg.patch).items()}
    if t is None:
        t = float(rng.uniform())
    if eps is None:
        eps = {
            role: rng.standard_normal(clean[role].shape) for role in mode.targets
        }
    else:
        eps = {r: (v[None] if v.ndim == 2 else v) for r, v in eps.items()}
    return _batched_loss(model, mode, text_ids, cond, clean, np.array([t]), eps)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    warmup_steps: int = 200
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    modes: tuple[str, ...] = ("fg_gen", "bg_gen", "text2all")
    log_every: int = 1
    lr_schedule: str = "constant"  # "constant" (after warmup) or "cosine"


def train(
    model: LayerDenoiser,
    dataset: list[LayerTriplet],
    train_cfg: TrainConfig,
    log_path=None,
) -> list[dict]:
    """Multi-task training: each step draws a mode uniformly, then a batch."""
    if not dataset:
        raise ModelError("dataset is empty")
    if not train_cfg.modes:
        raise ModelError("at least one mode must be enabled")
    modes = [get_mode(m) for m in train_cfg.modes]
    cfg = model.cfg
    rng = np.random.default_rng(train_cfg.seed)
    opt = AdamW(
        model.params,
        lr=train_cfg.lr,
        betas=train_cfg.betas,
        weight_decay=train_cfg.weight_decay,
    )
    if train_cfg.lr_schedule == "cosine":
        lr_at = warmup_cosine_schedule(
            train_cfg.lr, train_cfg.warmup_steps, train_cfg.steps
        )
    elif train_cfg.lr_schedule == "constant":
        lr_at = linear_warmup_schedule(train_cfg.lr, train_cfg.warmup_steps)
    else:
        raise ModelError(f"unknown lr_schedule {train_cfg.lr_schedule!r}")

    # Per-sample caches: patch matrices and text ids never change.
    text_cache = [
        tokenize_text(s.captions.get("composite_text", ""), cfg) for s in dataset
    ]
    cond_cache = {
        m.name: [condition_patches(s, m, cfg.patch) for s in dataset] for m in modes
    }
    clean_cache = {
        m.name: [target_patches(s, m, cfg.patch) for s in dataset] for m in modes
    }

    log: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(train_cfg.steps):
            mode = modes[rng.integers(len(modes))]
            idx = rng.integers(len(dataset), size=train_cfg.batch_size)
            text_ids = np.stack([text_cache[i] for i in idx])
            cond = {
                role: np.stack([cond_cache[mode.name][i][role] for i in idx])
                for role in cond_cache[mode.name][0]
            }
            clean = {
                role: np.stack([clean_cache[mode.name][i][role] for i in idx])
                for role in mode.targets
            }
            ts = rng.uniform(size=train_cfg.batch_size)
            eps = {role: rng.standard_normal(clean[role].shape) for role in mode.targets}
            loss = _batched_loss(model, mode, text_ids, cond, clean, ts, eps)
            value = float(loss.values)
            if not np.isfinite(value):
                dump = {"step": step, "mode": mode.name, "loss": value, "t": ts.tolist()}
                raise TrainingDivergedError(f"non-finite loss at step {step}: {json.dumps(dump)}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step(lr=lr_at(step))
            if step % train_cfg.log_every == 0:
                entry = {"step": step, "mode": mode.name, "loss": value}
                log.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return log


def sample(
    model: LayerDenoiser,
    mode: ModeSpec | str,
    conditions: dict,
    steps: int | None = None,
    seed: int = 0,
    velocity_fn=None,
) -> dict[str, RgbaImage]:
    """Deterministic iterative sampling of all target layers for a mode.

    ``conditions`` supplies "caption" plus the mode's image conditions
    ("mask": Mask, "bg"/"fg": RgbaImage). ``velocity_fn`` replaces the
    model's prediction (used by the exact-integration oracle in tests).
    """
    if isinstance(mode, str):
        mode = get_mode(mode)
    cfg = model.cfg
    steps = cfg.sample_steps if steps is None else int(steps)
    cond = {}
    for role in _CONDITION_ORDER:
        if role not in mode.conditions:
            continue
        if role not in conditions:
            raise ModelError(f"mode {mode.name} requires condition {role!r}")
        img = conditions[role]
        if role == "mask":
            img = mask_to_image(img) if isinstance(img, Mask) else img
        if img.data.shape[0] != cfg.image_size or img.data.shape[1] != cfg.image_size:
            raise ModelError(
                f"condition {role!r} is {img.data.shape[:2]}, model expects {cfg.image_size}"
            )
        cond[role] = patchify(img, cfg.patch)[None]
    text_ids = tokenize_text(conditions.get("caption", ""), cfg)[None]
    rng = np.random.default_rng(seed)
    n, pd = cfg.patches_per_image, cfg.patch_dim
    x = {role: rng.standard_normal((1, n, pd)) for role in mode.targets}

    def predict(x_now: dict, t: float) -> np.ndarray:
        tokens, loss_mask, _ = model.assemble(mode, text_ids, cond, x_now)
        n_cond = int((~loss_mask).sum())
        with ad.no_grad():
            preds = model.forward(tokens, np.array([t]))
        return preds.values[:, n_cond:, :]

    with ad.no_grad():
        if cfg.schedule == "linear_flow":
            dt = 1.0 / steps
            for k in range(steps):
                t = 1.0 - k * dt
                if velocity_fn is not None:
                    flat = velocity_fn({r: x[r] for r in mode.targets}, t)
                else:
                    flat = predict(x, t)
                offset = 0
                for role in mode.targets:
                    x[role] = x[role] - dt * flat[:, offset : offset + n, :]
                    offset += n
        else:  # vp: deterministic DDIM (eta = 0) on a uniform grid
            grid = np.linspace(1.0, 0.0, steps + 1)
            for k in range(steps):
                t, t_next = grid[k], grid[k + 1]
                abar = np.cos(np.pi * t / 2.0) ** 2
                abar_next = np.cos(np.pi * t_next / 2.0) ** 2
                if velocity_fn is not None:
                    eps_hat = velocity_fn({r: x[r] for r in mode.targets}, t)
                else:
                    eps_hat = predict(x, t)
                offset = 0
                for role in mode.targets:
                    e = eps_hat[:, offset : offset + n, :]
                    x0_hat = (x[role] - np.sqrt(1.0 - abar) * e) / max(np.sqrt(abar), 1e-6)
                    x0_hat = np.clip(x0_hat, -1.0, 2.0)
                    x[role] = np.sqrt(abar_next) * x0_hat + np.sqrt(1.0 - abar_next) * e
                    offset += n
    out = {}
    for role in mode.targets:
        arr = np.clip(unpatchify(x[role][0], cfg.patch, cfg.image_size, cfg.image_size), 0.0, 1.0)
        if role in ("comp", "bg"):
            arr[:, :, 3] = 1.0
        out[role] = RgbaImage(arr)
    return out


def psnr(a: RgbaImage, b: RgbaImage, cap_db: float = 80.0) -> float:
    err = float(np.mean((a.data - b.data) ** 2))
    if err <= 0:
        return cap_db
    return min(cap_db, 10.0 * np.log10(1.0 / err))
