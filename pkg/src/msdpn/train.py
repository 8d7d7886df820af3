# src/msdpn/train.py
"""
Masked-L1 losses, Adam with decoupled weight decay, the deterministic training
loop and checkpoint files.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from . import ConfigError, FormatError, ShapeError
from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data_utils import save_dataframe_to_csv
from .datagen import SceneSample, decode_tensor, encode_tensor
from .encoding import INPUT_MODES, DepthImage, InputTensor, assemble_input, dropout_scan, make_proj_d, make_ref_d
from .geometry import project_scan
from .nn import MSDPN, NetworkConfig, msdpn_forward
from .system_utils import ordered_map

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MSDC"
CHECKPOINT_VERSION = 1
LOSS_TRACE_NAME = "loss.csv"
FINAL_CHECKPOINT_NAME = "model.msdc"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 1e-4
    lr_decay_per_epoch: float = 0.98
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    input_mode: Optional[str] = None     # None: follow the model
    checkpoint_every: int = 0            # 0: final checkpoint only
    stage_losses: bool = False

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}.")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2}).")
        if self.eps_adam <= 0 or self.weight_decay < 0:
            raise ConfigError("eps_adam must be > 0 and weight_decay >= 0.")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ConfigError(f"lr_decay_per_epoch must lie in (0, 1], got {self.lr_decay_per_epoch}.")
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 0:
            raise ConfigError("epochs and checkpoint_every must be >= 0, batch_size >= 1.")
        if self.input_mode is not None and self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}, got '{self.input_mode}'.")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimState:
    """Adam moments (float32, keyed by parameter name) and the step counter."""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def initial(cls, params: Sequence[Parameter]) -> "OptimState":
        state = cls()
        for p in params:
            state.m[p.name] = np.zeros(p.shape, dtype=np.float32)
            state.v[p.name] = np.zeros(p.shape, dtype=np.float32)
        return state


# --- losses ---

def _target(values, shape: Tuple[int, ...]) -> np.ndarray:
    array = np.asarray(values.data if isinstance(values, DepthImage) else values, dtype=np.float64)
    if array.shape != shape and array.size == int(np.prod(shape)) and array.ndim < len(shape):
        array = array.reshape(shape)
    return array


def loss_proj(pred: Tensor, gt) -> Tensor:
    """Masked-mean L1 between pred and gt over pixels with gt > 0."""
    target = _target(gt, pred.shape)
    return ad.l1_masked(pred, target, (target > 0).astype(np.float64))


def loss_ref(pred_res: Tensor, ref_d, gt) -> Tensor:
    """Masked-mean L1 between (pred_res + ref_d) and gt over pixels with gt > 0."""
    target = _target(gt, pred_res.shape)
    ref = _target(ref_d, pred_res.shape)
    if ref.shape != target.shape:
        raise ShapeError(f"loss_ref: ref-d {ref.shape} does not match gt {target.shape}.")
    mask = (target > 0).astype(np.float64)
    # |gt − (res + ref)| == |(gt − ref) − res|
    return ad.l1_masked(pred_res, np.where(mask > 0, target - ref, 0.0), mask)


# --- optimiser ---

def lr_schedule(base_lr: float, epoch: int, decay: float = 0.98) -> float:
    """Learning rate for a 0-based epoch: base_lr · decay^epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}.")
    return base_lr * decay ** epoch


def adam_step(params: Sequence[Parameter], grads: Sequence[Optional[np.ndarray]], state: OptimState, lr_t: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> OptimState:
    """
    One bias-corrected Adam update in place. Decoupled weight decay
    p <- p - lr_t·wd·p is applied before the Adam step; a missing gradient
    counts as zero.

    Raises:
        ShapeError: If a gradient or moment does not match its parameter.
    """
    state.step += 1
    t = state.step
    for p, g in zip(params, grads):
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"Gradient {g.shape} does not match parameter '{p.name}' {p.shape}.")
        if p.name not in state.m:
            state.m[p.name] = np.zeros(p.shape, dtype=np.float32)
            state.v[p.name] = np.zeros(p.shape, dtype=np.float32)
        if state.m[p.name].shape != p.shape:
            raise ShapeError(f"Adam moments for '{p.name}' do not match its shape {p.shape}.")
        value = p.data.astype(np.float64)
        value = value - lr_t * weight_decay * value
        m = beta1 * state.m[p.name].astype(np.float64) + (1 - beta1) * g
        v = beta2 * state.v[p.name].astype(np.float64) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        value = value - lr_t * m_hat / (np.sqrt(v_hat) + eps)
        p.data = value.astype(p.data.dtype)
        state.m[p.name] = m.astype(np.float32)
        state.v[p.name] = v.astype(np.float32)
    return state


# --- data preparation ---

@dataclass(frozen=True)
class TrainingExample:
    input: InputTensor
    ref_d: Optional[DepthImage]
    gt: DepthImage
    sample_id: str = ""


def prepare_example(sample: SceneSample, input_mode: str, keep_fraction: float = 1.0,
                    seed: int = 0) -> TrainingExample:
    """Projects the sample's scan (after optional dropout), encodes it and assembles the input."""
    height, width = sample.gt_depth.shape
    scan = sample.scan if keep_fraction >= 1.0 else dropout_scan(sample.scan, keep_fraction, seed)
    proj_d = make_proj_d(project_scan(scan, sample.rig.extrinsic, sample.rig.intrinsics), height, width)
    ref_d = make_ref_d(proj_d)
    channel = ref_d if input_mode == "ref-d" else proj_d
    tensor = assemble_input(sample.rgb, channel, input_mode)
    return TrainingExample(tensor, ref_d if input_mode == "ref-d" else None, sample.gt_depth, sample.sample_id)


def prepare_examples(samples: Sequence[SceneSample], input_mode: str, keep_fraction: float = 1.0, seed: int = 0,
                     workers: Optional[int] = None,
                     logger_instance: Optional[logging.Logger] = None) -> List[TrainingExample]:
    """prepare_example per sample; dropout for sample i is seeded with seed + i."""
    log = logger_instance if logger_instance is not None else logger
    if input_mode not in INPUT_MODES:
        raise ConfigError(f"Unknown input mode '{input_mode}'; expected one of {INPUT_MODES}.")
    return ordered_map(lambda item: prepare_example(item[1], input_mode, keep_fraction, seed + item[0]),
                       list(enumerate(samples)), workers=workers, logger_instance=log)


# --- training loop ---

def _stack_batch(batch: Sequence[TrainingExample]):
    x = np.stack([e.input.tensor for e in batch])
    gt = np.stack([e.gt.data for e in batch])[:, None]
    ref = None if batch[0].ref_d is None else np.stack([e.ref_d.data for e in batch])[:, None]
    return x, gt, ref


def _batch_loss(result, gt: np.ndarray, ref: Optional[np.ndarray], stage_losses: bool) -> Tensor:
    def one(pred: Tensor) -> Tensor:
        return loss_proj(pred, gt) if ref is None else loss_ref(pred, ref, gt)

    if not stage_losses:
        return one(result.residual)
    total = None
    for features in result.stages:
        term = one(features.depth)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(result.stages))


def train(model: Optional[MSDPN], dataset: Sequence[Union[TrainingExample, SceneSample]], config: TrainConfig,
          out_dir: Optional[Union[str, Path]] = None, resume_from: Optional[Union[str, Path]] = None,
          logger_instance: Optional[logging.Logger] = None) -> Tuple[MSDPN, List[float]]:
    """
    Trains `model` with per-epoch shuffling seeded by (seed, epoch), dropping
    the last partial batch. Records the mean loss per epoch.

    With `out_dir`, writes loss.csv, periodic checkpoints (checkpoints/epoch_NNNN.msdc)
    and the final model.msdc. `resume_from` continues a checkpointed run
    (the model is taken from the checkpoint).

    Returns:
        (model, loss_trace)

    Raises:
        ValueError: On an empty dataset.
        ConfigError: On input-mode mismatches or a batch larger than the dataset.
    """
    log = logger_instance if logger_instance is not None else logger
    if len(dataset) == 0:
        raise ValueError("Cannot train on an empty dataset.")

    start_epoch, loss_trace = 0, []
    if resume_from is not None:
        checkpoint = load_checkpoint(resume_from, logger_instance=log)
        model, state = checkpoint.model, checkpoint.state
        start_epoch, loss_trace = checkpoint.epoch, list(checkpoint.loss_trace)
        log.info(f"Resuming from {resume_from} at epoch {start_epoch} (step {state.step})")
    elif model is None:
        raise ValueError("train() needs a model or a checkpoint to resume from.")

    mode = model.config.input_mode
    if config.input_mode is not None and config.input_mode != mode:
        raise ConfigError(f"Training configured for '{config.input_mode}' but the model expects '{mode}'.")
    examples = [prepare_example(item, mode) if isinstance(item, SceneSample) else item for item in dataset]
    mismatched = [e.sample_id for e in examples if e.input.mode != mode]
    if mismatched:
        raise ConfigError(f"Examples {mismatched[:5]} are encoded for another input mode than '{mode}'.")
    n_batches = len(examples) // config.batch_size
    if n_batches == 0:
        raise ConfigError(f"batch_size {config.batch_size} exceeds the dataset size {len(examples)}.")

    params = model.parameters()
    if resume_from is None:
        state = OptimState.initial(params)
    out_dir = Path(out_dir) if out_dir is not None else None
    model.train()
    log.info(f"Training {len(examples)} examples, {n_batches} batch(es) of {config.batch_size}, "
             f"epochs {start_epoch}..{config.epochs - 1}")

    for epoch in range(start_epoch, config.epochs):
        lr_t = lr_schedule(config.lr, epoch, config.lr_decay_per_epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(examples))
        batch_losses = []
        for b in range(n_batches):
            x, gt, ref = _stack_batch([examples[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]])
            model.zero_grad()
            result = msdpn_forward(model, x, ref)
            loss = _batch_loss(result, gt, ref, config.stage_losses)
            ad.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr_t, config.beta1, config.beta2,
                      config.eps_adam, config.weight_decay)
            batch_losses.append(float(np.float64(loss.data)))
        # float32 like the checkpointed trace, so resumed runs reproduce loss.csv
        loss_trace.append(float(np.float32(np.mean(batch_losses))))
        log.info(f"Epoch {epoch}: lr={lr_t:.6g} loss={loss_trace[-1]:.6f}")
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(model, state, out_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.msdc",
                            epoch=epoch + 1, loss_trace=loss_trace, train_config=config, logger_instance=log)

    if out_dir is not None:
        frame = pd.DataFrame({"epoch": np.arange(len(loss_trace)), "loss": loss_trace})
        save_dataframe_to_csv(frame, out_dir / LOSS_TRACE_NAME, logger_instance=log)
        save_checkpoint(model, state, out_dir / FINAL_CHECKPOINT_NAME, epoch=max(config.epochs, start_epoch),
                        loss_trace=loss_trace, train_config=config, logger_instance=log)
    return model, loss_trace


# --- checkpoints ---

@dataclass
class Checkpoint:
    model: MSDPN
    state: OptimState
    epoch: int = 0
    loss_trace: List[float] = field(default_factory=list)
    train_config: Optional[TrainConfig] = None


def _count_tensor(value: int) -> np.ndarray:
    # float32 entries hold 16-bit halves exactly
    value = int(value)
    if not 0 <= value < 1 << 32:
        raise ValueError(f"counter {value} does not fit in 32 bits")
    return np.array([value >> 16, value & 0xFFFF], dtype=np.float32)


def _tensor_count(array: np.ndarray, key: str, path: Path) -> int:
    if array.shape == (1,):
        return int(array[0])
    if array.shape != (2,):
        raise FormatError(f"malformed entry '{key}'", path=path)
    return (int(array[0]) << 16) + int(array[1])


def _json_tensor(payload: dict) -> np.ndarray:
    raw = json.dumps(payload, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def save_checkpoint(model: MSDPN, state: OptimState, path: Union[str, Path], epoch: int = 0,
                    loss_trace: Sequence[float] = (), train_config: Optional[TrainConfig] = None,
                    logger_instance: Optional[logging.Logger] = None) -> Path:
    """
    Writes parameters, Adam moments (<param>.m / <param>.v), batch-norm running
    statistics, __step, __epoch, __loss_trace and the network/train configuration
    (__config, UTF-8 JSON bytes) as one MSDC file.
    """
    log = logger_instance if logger_instance is not None else logger
    entries: List[Tuple[str, np.ndarray]] = []
    for name, param in model.named_parameters():
        entries.append((name, param.data))
        entries.append((f"{name}.m", state.m.get(name, np.zeros(param.shape, dtype=np.float32))))
        entries.append((f"{name}.v", state.v.get(name, np.zeros(param.shape, dtype=np.float32))))
    for name, stats in model.named_running_stats():
        entries.append((f"{name}_mean", stats.mean))
        entries.append((f"{name}_var", stats.var))
    entries.append(("__step", _count_tensor(state.step)))
    entries.append(("__epoch", _count_tensor(epoch)))
    entries.append(("__loss_trace", np.asarray(loss_trace, dtype=np.float32).reshape(-1)))
    entries.append(("__config", _json_tensor({
        "network": model.config.to_dict(),
        "train": None if train_config is None else train_config.to_dict(),
    })))

    chunks = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(entries))]
    for name, array in entries:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(encode_tensor(array))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    log.info(f"Checkpoint ({len(entries)} entries, step {state.step}) written to {path}")
    return path


def _read_entries(buffer: bytes, path: Path) -> Dict[str, np.ndarray]:
    if len(buffer) < 9:
        raise FormatError("truncated checkpoint header", path=path, offset=len(buffer))
    if buffer[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(buffer[:4])!r}", path=path, offset=0)
    version, count = struct.unpack_from("<BI", buffer, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path=path, offset=4)
    cursor = 9
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(buffer) < cursor + 2:
            raise FormatError("truncated entry name", path=path, offset=len(buffer))
        (length,) = struct.unpack_from("<H", buffer, cursor)
        cursor += 2
        if len(buffer) < cursor + length:
            raise FormatError("truncated entry name", path=path, offset=len(buffer))
        try:
            name = buffer[cursor:cursor + length].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", path=path, offset=cursor)
        cursor += length
        entries[name], cursor = decode_tensor(buffer, cursor, path=path)
    if cursor != len(buffer):
        raise FormatError(f"{len(buffer) - cursor} trailing bytes after the last entry", path=path, offset=cursor)
    return entries


def load_checkpoint(path: Union[str, Path], logger_instance: Optional[logging.Logger] = None) -> Checkpoint:
    """
    Rebuilds the model and optimiser state stored by save_checkpoint.

    Raises:
        FileNotFoundError: If the file does not exist.
        FormatError: On bad magic/version, truncation, or entries that do not
                     match the stored network configuration.
    """
    log = logger_instance if logger_instance is not None else logger
    path = Path(path)
    if not path.exists():
        log.error(f"Checkpoint not found: {path}")
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    entries = _read_entries(path.read_bytes(), path)

    try:
        payload = json.loads(bytes(entries["__config"].astype(np.uint8)).decode("utf-8"))
        config = NetworkConfig(**payload["network"])
        train_config = None if payload.get("train") is None else TrainConfig(**payload["train"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"unreadable __config entry: {e}", path=path)

    model = MSDPN(config)
    state = OptimState()
    expected = set()
    for name, param in model.named_parameters():
        for key in (name, f"{name}.m", f"{name}.v"):
            expected.add(key)
            if key not in entries:
                raise FormatError(f"missing entry '{key}'", path=path)
            if entries[key].shape != param.shape:
                raise FormatError(f"entry '{key}' has shape {entries[key].shape}, expected {param.shape}", path=path)
        param.data = entries[name].astype(param.data.dtype)
        state.m[name] = entries[f"{name}.m"].copy()
        state.v[name] = entries[f"{name}.v"].copy()
    for name, stats in model.named_running_stats():
        for suffix, target in (("_mean", stats.mean), ("_var", stats.var)):
            key = name + suffix
            expected.add(key)
            if key not in entries or entries[key].shape != target.shape:
                raise FormatError(f"missing or malformed entry '{key}'", path=path)
            target[...] = entries[key]
    meta = {"__step", "__epoch", "__loss_trace", "__config"}
    unknown = sorted(set(entries) - expected - meta)
    if unknown:
        raise FormatError(f"unexpected entries {unknown[:5]}", path=path)
    state.step = _tensor_count(entries["__step"], "__step", path) if "__step" in entries else 0
    epoch = _tensor_count(entries["__epoch"], "__epoch", path) if "__epoch" in entries else 0
    trace = [float(v) for v in entries.get("__loss_trace", np.zeros(0))]
    log.info(f"Loaded checkpoint {path} (epoch {epoch}, step {state.step})")
    return Checkpoint(model=model, state=state, epoch=epoch, loss_trace=trace, train_config=train_config)

