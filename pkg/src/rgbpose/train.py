"""Training loop, Adam optimizer and checkpoint files.

A checkpoint is a pair: ``<path>`` holds an INI header (config snapshot, tensor
table with payload offsets, optimizer step, epoch, RNG state) and
``<path>.bin`` holds little-endian float64 tensors.
"""
from __future__ import annotations

import configparser
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import model
from .config import RunConfig, parse_config_text
from .diffmath import Params, Tape
from .errors import ConfigError, EmptyInstanceError
from .synth import Dataset, SceneSample

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rgbpose-checkpoint"
CHECKPOINT_VERSION = 1
LOG_HEADER = "epoch\tstep\ttotal\tL_s\tL_corr\tL_g\treg\n"


class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params if n not in params.frozen}
        self.v = {n: np.zeros_like(t.data) for n, t in params if n not in params.frozen}

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, m in self.m.items():
            t = self.params[name]
            if t.grad is None:
                g = np.zeros_like(t.data)
            else:
                g = t.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v = self.v[name]
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    cfg: RunConfig
    params: Params
    opt: Adam
    rng: np.random.Generator
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def new_state(cfg: RunConfig) -> TrainState:
    params = model.build_params(cfg)
    return TrainState(cfg, params, Adam(params, cfg.lr), np.random.default_rng([cfg.seed, 303]))


class NonFiniteLossError(FloatingPointError):
    pass


def _first_nonfinite(params: Params, parts: dict[str, float]) -> str:
    for name, val in parts.items():
        if not math.isfinite(val):
            culprit = name
            break
    else:
        culprit = "total"
    for name, t in params:
        if not np.all(np.isfinite(t.data)):
            return f"loss component {culprit}; first non-finite tensor {name}"
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return f"loss component {culprit}; first non-finite gradient {name}"
    return f"loss component {culprit}"


def prepare_all(samples: list[SceneSample], params: Params, cfg: RunConfig) -> list:
    prepared = []
    for s in samples:
        try:
            prepared.append((s, model.prepare(s, params, cfg)))
        except EmptyInstanceError:
            log.warning("skipping %s/%d: no observed tokens", s.split, s.index)
    return prepared


def train_step(state: TrainState, batch: list) -> dict[str, float]:
    """One optimizer step on a batch of (sample, prepared) pairs; returns mean loss parts."""
    cfg, params = state.cfg, state.params
    params.zero_grad()
    with Tape() as tape:
        parts = model.batch_loss(batch, params, cfg)
        loss = parts.total
    means = parts.values()
    if not math.isfinite(means["total"]):
        raise NonFiniteLossError(f"non-finite loss: {_first_nonfinite(params, means)}")
    tape.backward(loss)
    tape.free()
    state.opt.step()
    return means


def format_log_line(epoch: int, step: int, parts: dict[str, float]) -> str:
    vals = "\t".join(repr(parts[k]) for k in ("total", "L_s", "L_corr", "L_g", "reg"))
    return f"{epoch}\t{step}\t{vals}\n"


def run_epochs(state: TrainState, prepared: list, until_epoch: int,
               on_step: Callable[[str], None] | None = None,
               on_epoch: Callable[[TrainState], None] | None = None) -> None:
    cfg = state.cfg
    n = len(prepared)
    if n == 0:
        raise ConfigError("training split has no usable samples")
    while state.epoch < until_epoch:
        order = state.rng.permutation(n)
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            batch = [prepared[i] for i in order[lo:lo + cfg.batch_size]]
            parts = train_step(state, batch)
            if on_step is not None:
                on_step(format_log_line(state.epoch, step, parts))
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state)


def train(cfg: RunConfig, dataset: Dataset, out_dir, resume: str | None = None,
          progress: Callable[[str], None] | None = None) -> TrainState:
    """Train on the dataset's train split, writing ``loss_log.tsv`` and checkpoints to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.check_compatible(model.build_params(cfg), cfg, dataset.prior_points, dataset.H)
    state = load_checkpoint(resume) if resume else new_state(cfg)
    if resume:
        state.cfg = state.cfg.replace(epochs=cfg.epochs)
    prepared = prepare_all(dataset.samples("train"), state.params, state.cfg)
    log_path = out / "loss_log.tsv"
    if resume and log_path.exists():
        _truncate_log(log_path, state.epoch)
    else:
        log_path.write_text(LOG_HEADER, encoding="utf-8")

    with log_path.open("a", encoding="utf-8") as fh:
        def on_epoch(st: TrainState) -> None:
            fh.flush()
            if st.epoch % st.cfg.checkpoint_every == 0 or st.epoch == st.cfg.epochs:
                save_checkpoint(st, out / f"epoch_{st.epoch:04d}.ckpt")
                save_checkpoint(st, out / "last.ckpt")
            if progress is not None:
                progress(f"epoch {st.epoch}/{st.cfg.epochs}")

        run_epochs(state, prepared, state.cfg.epochs, fh.write, on_epoch)
    if state.epoch == 0 or not (out / "last.ckpt").exists():
        save_checkpoint(state, out / "last.ckpt")
    return state


def _truncate_log(path: Path, epoch: int) -> None:
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = [ln for ln in lines[1:] if int(ln.split("\t", 1)[0]) < epoch]
    path.write_text(LOG_HEADER + "".join(kept), encoding="utf-8")


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    blobs: list[bytes] = []
    offset = 0
    header = configparser.ConfigParser(interpolation=None)
    header.optionxform = str
    header["checkpoint"] = {
        "format": CHECKPOINT_FORMAT,
        "version": str(CHECKPOINT_VERSION),
        "payload": path.name + ".bin",
        "epoch": str(state.epoch),
        "optimizer_step": str(state.opt.step_count),
        "rng_state": json.dumps(state.rng.bit_generator.state, sort_keys=True),
    }
    header["config"] = {k: v.strip() for k, v in
                        (line.split("=", 1) for line in state.cfg.to_text().splitlines())}

    def put(section: str, arr: np.ndarray, extra: dict) -> None:
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        header[section] = {"shape": ",".join(map(str, arr.shape)) or "scalar",
                           "offset": str(offset), "bytes": str(len(raw)), **extra}
        blobs.append(raw)
        offset += len(raw)

    for name, t in state.params:
        put(f"tensor.{name}", t.data, {"frozen": str(name in state.params.frozen).lower()})
    for name in state.opt.m:
        put(f"adam_m.{name}", state.opt.m[name], {})
        put(f"adam_v.{name}", state.opt.v[name], {})
    with path.open("w", encoding="utf-8") as fh:
        header.write(fh)
    Path(str(path) + ".bin").write_bytes(b"".join(blobs))


def _read(sec, payload: bytes) -> np.ndarray:
    off, nb = int(sec["offset"]), int(sec["bytes"])
    if off + nb > len(payload):
        raise ConfigError(f"checkpoint payload truncated at offset {off}")
    arr = np.frombuffer(payload[off:off + nb], dtype="<f8").astype(np.float64)
    shape = () if sec["shape"] == "scalar" else tuple(int(x) for x in sec["shape"].split(","))
    return arr.reshape(shape)


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    header = configparser.ConfigParser(interpolation=None)
    header.optionxform = str
    if not header.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read checkpoint {path}")
    c = header["checkpoint"]
    if c.get("format") != CHECKPOINT_FORMAT or int(c.get("version", -1)) != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: not a supported checkpoint")
    cfg = parse_config_text("\n".join(f"{k} = {v}" for k, v in header["config"].items()))
    payload = (path.parent / c["payload"]).read_bytes()
    state = new_state(cfg)
    for name, t in state.params:
        sec = f"tensor.{name}"
        if sec not in header:
            raise ConfigError(f"checkpoint lacks tensor {name}")
        arr = _read(header[sec], payload)
        if arr.shape != t.shape:
            raise ConfigError(f"tensor {name}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data = arr.copy()
    for name in state.opt.m:
        state.opt.m[name] = _read(header[f"adam_m.{name}"], payload).copy()
        state.opt.v[name] = _read(header[f"adam_v.{name}"], payload).copy()
    state.opt.step_count = int(c["optimizer_step"])
    state.epoch = int(c["epoch"])
    state.rng.bit_generator.state = json.loads(c["rng_state"])
    return state
