"""Two-phase training.

Phase 1 (``pretrain``) fits the feature extractor and quality head, together
with the agents' reliabilities, on pseudo-labeled pairs. Phase 2 (``adapt``)
adds the consensus classifier, the adversarial domain loss and domain mixup
against an unlabeled target image set.

All randomness (initialization, data order, crops, target draws, mixup
ratios) is derived from ``TrainConfig.seed``, so a run is reproducible and a
checkpoint taken at an epoch boundary resumes bit-identically.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import objectives as obj
from .errors import CheckpointError, ConfigurationError, TrainingDivergedError, ValidationError
from .imaging import list_images, load_image_uint8
from .model import STD_FLOOR, BackboneConfig, ModelBundle, forward_clc, forward_domain
from .objectives import LossWeights, ReliabilityParams
from .pairs import read_pairs

logger = logging.getLogger(__name__)

PHASES = ("pretrain", "adapt")


@dataclass
class TrainConfig:
    """Optimization settings. Defaults follow the published full-scale setup;
    :meth:`desk` gives the CPU-sized variant used by the fixture pipeline."""

    t1_epochs: int = 8
    t2_epochs: int = 2
    lr_phase1: float = 1e-4
    lr_decay_divisor: float = 3.0
    lr_decay_every: int = 3
    lr_phase2: float = 1e-6
    batch_pairs: int = 16
    crop: tuple = (384, 384)
    momentum: float = 0.9
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    backbone: str = "resnet18_like"
    feature_dim: int = 512
    std_floor: float = STD_FLOOR
    clamp_eps: float = obj.CLAMP_EPS
    grl_scale: float = 1.0
    disc_lr_scale: float = 1.0
    loss_form: str = "adl"
    use_clc: bool = True
    use_mixup: bool = True
    use_clc_in_pretrain: bool = False

    def __post_init__(self):
        if isinstance(self.crop, int):
            self.crop = (self.crop, self.crop)
        self.crop = tuple(int(v) for v in self.crop)
        if len(self.crop) != 2 or min(self.crop) < 1:
            raise ConfigurationError(f"crop must be two positive ints, got {self.crop}")
        for name in ("t1_epochs", "t2_epochs", "lr_decay_every", "batch_pairs"):
            v = getattr(self, name)
            if int(v) != v or v < (1 if name in ("lr_decay_every", "batch_pairs") else 0):
                raise ConfigurationError(f"{name} has invalid value {v!r}")
        for name in ("lr_phase1", "lr_phase2", "lr_decay_divisor", "std_floor", "clamp_eps", "disc_lr_scale"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        if not self.grl_scale >= 0:
            raise ConfigurationError("grl_scale must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.loss_form not in ("adl", "bce"):
            raise ConfigurationError(f"loss_form must be 'adl' or 'bce', got {self.loss_form!r}")
        if not self.clamp_eps < 0.5:
            raise ConfigurationError("clamp_eps must be < 0.5")
        self.backbone_config()  # validates kind and feature_dim

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Settings that train the small backbone on a few thousand pairs on one CPU."""
        base = dict(
            lr_phase1=1e-2,
            lr_phase2=5e-4,
            # the total loss scales the discriminator's own update by lambda2;
            # undo that so it keeps pace with the extractor over two epochs
            disc_lr_scale=12.5,
            batch_pairs=8,
            crop=(96, 96),
            backbone="small_conv",
            feature_dim=64,
        )
        base.update(overrides)
        return cls(**base)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.backbone, self.feature_dim, self.crop)

    def lr_at(self, phase: str, epoch: int) -> float:
        """Learning rate for 0-based ``epoch`` of ``phase``."""
        if phase == "pretrain":
            return self.lr_phase1 / self.lr_decay_divisor ** (epoch // self.lr_decay_every)
        return self.lr_phase2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["crop"] = list(self.crop)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


@dataclass
class TrainState:
    config: TrainConfig
    model: ModelBundle
    reliability: ReliabilityParams
    agent_ids: tuple
    phase: str = "pretrain"
    epoch: int = 0
    step: int = 0
    optimizer: torch.optim.Optimizer | None = None
    rng: np.random.Generator | None = None
    log: "StepLog | None" = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return len(self.agent_ids)


def init_state(config: TrainConfig, agent_ids) -> TrainState:
    torch.manual_seed(config.seed)
    model = ModelBundle(config.backbone_config(), config.std_floor, config.grl_scale)
    rel = ReliabilityParams(len(agent_ids))
    return TrainState(config, model, rel, tuple(agent_ids), rng=np.random.default_rng(config.seed))


def _trainable(state: TrainState, phase: str):
    """Parameters updated in ``phase``. C and D stay frozen during pretraining."""
    groups = state.model.parameter_groups()
    params = groups["features"] + groups["quality"] + list(state.reliability.parameters())
    cfg = state.config
    if phase == "adapt" or cfg.use_clc_in_pretrain:
        params += groups["clc"]
    if phase == "adapt":
        params += groups["discriminator"]
    return params


def _make_optimizer(state: TrainState, phase: str, lr: float):
    """SGD over the phase's parameters. The discriminator gets its own group
    so its step size can be scaled by ``disc_lr_scale``."""
    disc = {id(p) for p in state.model.discriminator.parameters()}
    params = _trainable(state, phase)
    groups = [{"params": [p for p in params if id(p) not in disc], "lr_scale": 1.0}]
    rest = [p for p in params if id(p) in disc]
    if rest:
        groups.append({"params": rest, "lr_scale": state.config.disc_lr_scale})
    for g in groups:
        g["lr"] = lr * g["lr_scale"]
    return torch.optim.SGD(groups, lr=lr, momentum=state.config.momentum)


# --- data ------------------------------------------------------------------


class _ImageCache:
    def __init__(self):
        self._cache = {}

    def __call__(self, path) -> np.ndarray:
        img = self._cache.get(path)
        if img is None:
            img = self._cache[path] = load_image_uint8(path)
        return img


def _crop_offsets(shape, crop, rng):
    h, w = shape[:2]
    ch, cw = crop
    if h < ch or w < cw:
        raise ValidationError(f"image of size {h}x{w} is smaller than the {ch}x{cw} crop")
    return int(rng.integers(h - ch + 1)), int(rng.integers(w - cw + 1))


def _cut(img, off, crop):
    return img[off[0] : off[0] + crop[0], off[1] : off[1] + crop[1]]


def _to_tensor(batch_uint8) -> torch.Tensor:
    arr = np.stack(batch_uint8).astype(np.float32) / 255.0
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy())


def _pair_batch(records, cache, crop, rng):
    """Crop both members of each pair. Same-size members share a crop window,
    so within-reference pairs compare the same content."""
    xs, ys = [], []
    for r in records:
        ix, iy = cache(r.x_path), cache(r.y_path)
        off = _crop_offsets(ix.shape, crop, rng)
        off_y = off if iy.shape == ix.shape else _crop_offsets(iy.shape, crop, rng)
        xs.append(_cut(ix, off, crop))
        ys.append(_cut(iy, off_y, crop))
    return _to_tensor(xs), _to_tensor(ys)


def _target_batch(target_paths, n, cache, crop, rng):
    idx = rng.integers(len(target_paths), size=n)
    out = []
    for i in idx:
        img = cache(target_paths[i])
        out.append(_cut(img, _crop_offsets(img.shape, crop, rng), crop))
    return _to_tensor(out)


def _load_records(pairs):
    if isinstance(pairs, (str, Path)):
        pairs = read_pairs(pairs)
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("pair set is empty")
    ids = pairs[0].agent_ids
    if any(r.agent_ids != ids for r in pairs):
        raise ValidationError("pair records disagree on agent ids")
    return pairs


# --- logging ---------------------------------------------------------------


class StepLog:
    """Per-step CSV log of the loss components, learning rate and reliabilities."""

    def __init__(self, path, M: int):
        self.path = Path(path) if path is not None else None
        self.rows = []
        self.columns = ["phase", "epoch", "step", "lr", "l_q", "l_c", "l_d", "l_m", "total"]
        self.columns += [f"alpha_{m}" for m in range(M)] + [f"beta_{m}" for m in range(M)]
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new = not self.path.exists() or self.path.stat().st_size == 0
            self._fh = open(self.path, "a", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            if new:
                self._writer.writerow(self.columns)

    def write(self, row: dict):
        self.rows.append(row)
        if self.path is not None:
            self._writer.writerow([_fmt(row[c]) for c in self.columns])

    def close(self):
        if self.path is not None:
            self._fh.close()


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


# --- steps -----------------------------------------------------------------


def _losses(state: TrainState, phase: str, x, y, verdicts, target=None, mix_rng=None):
    """Loss components for one batch; unused components are exact zeros."""
    cfg, model = state.config, state.model
    w = cfg.weights
    n = x.shape[0]
    source = torch.cat([x, y])
    batch = [source]
    lam = None
    if phase == "adapt":
        batch.append(target)
        if cfg.use_mixup:
            x_m, lam = obj.mixup(source, target, mix_rng, w.xi)
            batch.append(x_m)
    # one forward pass, so batch-norm statistics are shared by all domains
    all_feats = model.extract(torch.cat(batch))
    feats = all_feats[: 2 * n]
    fx, fy = feats[:n], feats[n:]
    score, std = model.quality(feats)
    l_q = obj.quality_loss(score[:n], score[n:], std[:n], std[n:], verdicts, state.reliability)
    zero = torch.zeros((), dtype=l_q.dtype)
    l_c = l_d = l_m = zero
    eps = cfg.clamp_eps
    gamma = 0.0 if cfg.loss_form == "bce" else w.gamma
    use_c = cfg.use_clc and (phase == "adapt" or cfg.use_clc_in_pretrain)
    if use_c:
        labels = (2 * verdicts.sum(dim=1) >= verdicts.shape[1]).to(l_q.dtype)
        l_c = obj.clc_loss(forward_clc(model, fx, fy), labels, gamma, eps)
    if phase == "adapt":
        n_t = target.shape[0]
        p_s = forward_domain(model, feats)
        p_t = forward_domain(model, all_feats[2 * n : 2 * n + n_t])
        l_d = obj.domain_loss(p_s, p_t, gamma, eps)
        if cfg.use_mixup:
            p_m = forward_domain(model, all_feats[2 * n + n_t :])
            l_m = obj.mixup_loss(p_m, lam.to(p_m.dtype), gamma, eps)
    weights = LossWeights(
        lambda1=w.lambda1 if use_c else 0.0,
        lambda2=w.lambda2 if phase == "adapt" else 0.0,
        lambda3=w.lambda3 if phase == "adapt" and cfg.use_mixup else 0.0,
        gamma=w.gamma,
        xi=w.xi,
    )
    return l_q, l_c, l_d, l_m, weights


def _dump_batch(dump_dir, phase, epoch, step, records, comps):
    dump_dir = Path(dump_dir) if dump_dir is not None else Path(tempfile.mkdtemp(prefix="synthiqa-nan-"))
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"diverged_{phase}_e{epoch}_s{step}.json"
    payload = {
        "phase": phase,
        "epoch": epoch,
        "step": step,
        "components": {k: float(v.detach()) for k, v in comps.items()},
        "pairs": [
            {"x": r.x_path, "y": r.y_path, "type": r.pair_type, "verdicts": list(r.verdicts)} for r in records
        ],
    }
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path


def _run_epoch(state: TrainState, phase, records, cache, log, target_paths=None, dump_dir=None):
    cfg = state.config
    rng = state.rng
    lr = cfg.lr_at(phase, state.epoch)
    for g in state.optimizer.param_groups:
        g["lr"] = lr * g.get("lr_scale", 1.0)
    state.model.train()
    order = rng.permutation(len(records))
    B = cfg.batch_pairs
    for start in range(0, len(order), B):
        batch = [records[i] for i in order[start : start + B]]
        x, y = _pair_batch(batch, cache, cfg.crop, rng)
        verdicts = torch.tensor([r.verdicts for r in batch], dtype=torch.float32)
        target = None
        if phase == "adapt":
            target = _target_batch(target_paths, 2 * len(batch), cache, cfg.crop, rng)
        l_q, l_c, l_d, l_m, w = _losses(state, phase, x, y, verdicts, target, rng)
        comps = {"l_q": l_q, "l_c": l_c, "l_d": l_d, "l_m": l_m}
        try:
            total = obj.total_loss(l_q, l_c, l_d, l_m, w)
        except ValidationError as exc:
            path = _dump_batch(dump_dir, phase, state.epoch, state.step, batch, comps)
            raise TrainingDivergedError(f"{exc}; offending batch written to {path}") from None
        state.optimizer.zero_grad(set_to_none=True)
        total.backward()
        state.optimizer.step()
        state.step += 1
        row = {"phase": phase, "epoch": state.epoch + 1, "step": state.step, "lr": lr, "total": float(total.detach())}
        row.update({k: float(v.detach()) for k, v in comps.items()})
        with torch.no_grad():
            for m, (a, b) in enumerate(zip(state.reliability.alpha.tolist(), state.reliability.beta.tolist())):
                row[f"alpha_{m}"] = a
                row[f"beta_{m}"] = b
        log.write(row)
    state.epoch += 1


def pretrain(pairs, config: TrainConfig | None = None, state: TrainState | None = None, log_path=None,
             dump_dir=None, epochs: int | None = None) -> TrainState:
    """Phase 1: minimize the quality likelihood loss alone for ``t1_epochs``.

    Passing a ``state`` from a pretraining checkpoint resumes where it stopped.
    ``epochs`` limits how many epochs this call runs (the schedule is unchanged).
    """
    records = _load_records(pairs)
    if state is None:
        config = config or TrainConfig()
        state = init_state(config, records[0].agent_ids)
    elif state.phase != "pretrain":
        raise ValidationError("cannot resume pretraining from an adaptation checkpoint")
    config = state.config
    if records[0].agent_ids != state.agent_ids:
        raise ValidationError(f"pairs were labeled by {records[0].agent_ids}, model expects {state.agent_ids}")
    if state.optimizer is None:
        state.optimizer = _make_optimizer(state, "pretrain", config.lr_at("pretrain", state.epoch))
    cache = _ImageCache()
    log = StepLog(log_path, state.M)
    stop = config.t1_epochs if epochs is None else min(config.t1_epochs, state.epoch + epochs)
    try:
        while state.epoch < stop:
            _run_epoch(state, "pretrain", records, cache, log, dump_dir=dump_dir)
            logger.info("pretrain epoch %d/%d done", state.epoch, config.t1_epochs)
    finally:
        log.close()
    state.log = log
    return state


def adapt(state: TrainState, pairs, target_images, config: TrainConfig | None = None, log_path=None,
          dump_dir=None, epochs: int | None = None) -> TrainState:
    """Phase 2: joint objective against unlabeled target images for ``t2_epochs``.

    A pretraining state starts a fresh adaptation (new optimizer at the
    constant phase-2 learning rate); an adaptation state resumes.
    ``config`` optionally replaces the state's settings for this phase.
    """
    records = _load_records(pairs)
    if records[0].agent_ids != state.agent_ids:
        raise ValidationError(f"pairs were labeled by {records[0].agent_ids}, model expects {state.agent_ids}")
    if isinstance(target_images, (str, Path)):
        target_paths = [str(p) for p in list_images(target_images)]
    else:
        target_paths = [str(p) for p in target_images]
    if not target_paths:
        raise ValidationError("target image set is empty")
    if config is not None:
        state.config = config
        state.model.grl.scale = float(config.grl_scale)
    if state.phase == "pretrain":
        state.phase = "adapt"
        state.epoch = 0
        state.optimizer = None
    if state.optimizer is None:
        state.optimizer = _make_optimizer(state, "adapt", state.config.lr_phase2)
    cache = _ImageCache()
    log = StepLog(log_path, state.M)
    cfg = state.config
    stop = cfg.t2_epochs if epochs is None else min(cfg.t2_epochs, state.epoch + epochs)
    try:
        while state.epoch < stop:
            _run_epoch(state, "adapt", records, cache, log, target_paths, dump_dir)
            logger.info("adapt epoch %d/%d done", state.epoch, cfg.t2_epochs)
    finally:
        log.close()
    state.log = log
    return state


# --- checkpoints -----------------------------------------------------------

MAGIC = b"SYNTHIQA-CKPT\x00"
VERSION = "1.0.0"


def _pack(meta: dict, arrays: dict) -> bytes:
    """Deterministic container: JSON metadata then raw little-endian array bytes."""
    index = []
    blobs = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        index.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    head = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode("utf-8")
    body = struct.pack("<Q", len(head)) + head + b"".join(blobs)
    return body


def _unpack(body: bytes):
    (n,) = struct.unpack_from("<Q", body, 0)
    head = json.loads(body[8 : 8 + n].decode("utf-8"))
    offset = 8 + n
    arrays = {}
    for item in head["arrays"]:
        dt = np.dtype(item["dtype"])
        count = int(np.prod(item["shape"], dtype=np.int64))
        size = count * dt.itemsize
        arrays[item["name"]] = np.frombuffer(body, dtype=dt, count=count, offset=offset).reshape(item["shape"]).copy()
        offset += size
    if offset != len(body):
        raise CheckpointError("checkpoint body has trailing bytes")
    return head["meta"], arrays


def _version_tuple(v):
    try:
        return tuple(int(p) for p in v.split("."))
    except (AttributeError, ValueError):
        raise CheckpointError(f"unreadable checkpoint version {v!r}") from None


def state_to_bytes(state: TrainState) -> bytes:
    arrays = {}
    for k, v in state.model.state_dict().items():
        arrays[f"model/{k}"] = v.detach().cpu().numpy()
    for k, v in state.reliability.state_dict().items():
        arrays[f"reliability/{k}"] = v.detach().cpu().numpy()
    opt_meta = None
    if state.optimizer is not None:
        sd = state.optimizer.state_dict()
        opt_meta = {"param_groups": sd["param_groups"]}
        for idx, st in sd["state"].items():
            for k, v in st.items():
                if isinstance(v, torch.Tensor):
                    arrays[f"optim/{idx}/{k}"] = v.detach().cpu().numpy()
    meta = {
        "config": state.config.to_dict(),
        "agent_ids": list(state.agent_ids),
        "phase": state.phase,
        "epoch": state.epoch,
        "step": state.step,
        "optimizer": opt_meta,
        "rng": state.rng.bit_generator.state if state.rng is not None else None,
    }
    body = _pack(meta, arrays)
    digest = hashlib.sha256(body).digest()
    return MAGIC + VERSION.encode("ascii").ljust(16, b"\x00") + digest + body


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = state_to_bytes(state)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def state_from_bytes(data: bytes) -> TrainState:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic header)")
    pos = len(MAGIC)
    version = data[pos : pos + 16].rstrip(b"\x00").decode("ascii", errors="replace")
    pos += 16
    if _version_tuple(version)[0] != _version_tuple(VERSION)[0]:
        raise CheckpointError(f"checkpoint version {version} is incompatible with reader version {VERSION}")
    digest, body = data[pos : pos + 32], data[pos + 32 :]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint is corrupted (checksum mismatch)")
    try:
        meta, arrays = _unpack(body)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint is corrupted: {exc}") from None

    config = TrainConfig.from_dict(meta["config"])
    state = TrainState(
        config=config,
        model=ModelBundle(config.backbone_config(), config.std_floor, config.grl_scale),
        reliability=ReliabilityParams(len(meta["agent_ids"])),
        agent_ids=tuple(meta["agent_ids"]),
        phase=meta["phase"],
        epoch=int(meta["epoch"]),
        step=int(meta["step"]),
    )
    state.model.load_state_dict(
        {k[len("model/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("model/")}
    )
    state.reliability.load_state_dict(
        {k[len("reliability/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("reliability/")}
    )
    if meta["optimizer"] is not None:
        state.optimizer = _make_optimizer(state, state.phase, config.lr_at(state.phase, state.epoch))
        opt_state = {}
        for k, v in arrays.items():
            if k.startswith("optim/"):
                _, idx, name = k.split("/", 2)
                opt_state.setdefault(int(idx), {})[name] = torch.from_numpy(v)
        state.optimizer.load_state_dict({"state": opt_state, "param_groups": meta["optimizer"]["param_groups"]})
    if meta["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        state.rng = rng
    return state


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return state_from_bytes(data)


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
