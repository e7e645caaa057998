"""Training, evaluation, and distillation drivers.

Training is iteration-based: each iteration samples a batch of episodes,
runs shunt -> echelon -> patterns, sums the weighted objective over all
generations, and applies one decoupled-weight-decay Adam step.  Metrics
are line-delimited JSON records (one per iteration, plus one per periodic
evaluation) so plots and tests share one parser.

Checkpoints are a self-describing binary container: an 8-byte magic, a
length-prefixed JSON header (format version, config snapshot, tensor
manifest with offsets, payload checksum) and the raw little-endian tensor
payload.  Identical state serializes to identical bytes.

Distillation loads a frozen teacher and trains an attention-free student
on the same episodes, adding a KL term between teacher and student
query-row similarity distributions.  With gamma=0 the teacher is never
consulted and the run is bit-identical to plain training of the student.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import objective
from .episodes import EpisodeSource, EpisodeSpec
from .errors import CheckpointError, ConfigurationError, TrainingDivergedError
from .learner import ColorLearner, LearnerConfig, build_learner
from .objective import GenerationLosses
from .pattern import predict_labels

CHECKPOINT_MAGIC = b"CSHOTCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    iterations: int = 2000
    batch_episodes: int = 1
    seed: int = 0
    pattern_depth: int = 5
    eval_every: int = 0
    eval_episodes: int = 50
    lam: float = objective.DEFAULT_LAMBDA
    beta: float = objective.DEFAULT_BETA
    deterministic: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_episodes < 1:
            raise ConfigurationError(f"batch_episodes must be >= 1, got {self.batch_episodes}")
        if self.pattern_depth < 1:
            raise ConfigurationError(f"pattern_depth must be >= 1, got {self.pattern_depth}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EvalReport:
    mean_accuracy: float
    ci95_halfwidth: float
    episodes_evaluated: int
    per_episode_accuracies: list[float]

    @classmethod
    def from_accuracies(cls, accuracies) -> "EvalReport":
        accs = np.asarray(list(accuracies), dtype=np.float64)
        if accs.size == 0:
            raise ConfigurationError("cannot build an evaluation report from zero episodes")
        mean = float(accs.mean())
        if accs.size > 1:
            ci = float(1.96 * accs.std(ddof=1) / np.sqrt(accs.size))
        else:
            ci = 0.0
        return cls(mean, ci, int(accs.size), [float(a) for a in accs])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Checkpoint:
    """Versioned snapshot of a training run."""

    format_version: int
    config: dict  # {"learner": ..., "train": ..., "spec": ...}
    tensors: dict  # name -> np.ndarray (model state plus optimizer moments)
    optimizer_meta: dict  # step counts and param-group hyperparameters
    iteration: int

    def learner_config(self) -> LearnerConfig:
        return LearnerConfig.from_dict(self.config["learner"])

    def episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec.from_dict(self.config["spec"])


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    path = Path(path)
    names = sorted(checkpoint.tensors)
    manifest = []
    offset = 0
    chunks = []
    for name in names:
        arr = np.asarray(checkpoint.tensors[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        data = arr.tobytes()  # always C-order bytes, 0-d shapes preserved
        manifest.append(
            {
                "name": name,
                "dtype": np.dtype(arr.dtype).str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        offset += len(data)
        chunks.append(data)
    payload = b"".join(chunks)
    header = {
        "format_version": checkpoint.format_version,
        "byte_order": "little",
        "config": checkpoint.config,
        "iteration": checkpoint.iteration,
        "optimizer": checkpoint.optimizer_meta,
        "tensors": manifest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header_bytes).to_bytes(8, "little"))
        f.write(header_bytes)
        f.write(payload)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint file {path}: {exc}") from exc
    if len(blob) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError(f"checkpoint file {path} is truncated (no header)")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"checkpoint file {path} has a bad magic header")
    pos = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(blob[pos : pos + 8], "little")
    pos += 8
    if len(blob) < pos + header_len:
        raise CheckpointError(f"checkpoint file {path} is truncated (header)")
    try:
        header = json.loads(blob[pos : pos + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is corrupt in {path}: {exc}") from exc
    for key in ("format_version", "byte_order", "config", "iteration", "tensors",
                "optimizer", "payload_sha256"):
        if key not in header:
            raise CheckpointError(f"checkpoint header missing field {key!r} in {path}")
    if header["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format_version {header['format_version']} "
            f"(expected {CHECKPOINT_VERSION}) in {path}"
        )
    if header["byte_order"] != "little":
        raise CheckpointError(f"unsupported byte_order {header['byte_order']!r} in {path}")
    payload = blob[pos + header_len :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"checkpoint payload checksum mismatch in {path}")
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        start, nbytes = entry["offset"], entry["nbytes"]
        if dtype.itemsize * int(np.prod(shape, dtype=np.int64)) != nbytes:
            raise CheckpointError(
                f"tensor {entry['name']!r} shape manifest disagrees with its byte size"
            )
        if start + nbytes > len(payload):
            raise CheckpointError(f"tensor {entry['name']!r} extends past the payload")
        tensors[entry["name"]] = np.frombuffer(
            payload[start : start + nbytes], dtype=dtype
        ).reshape(shape).copy()
    return Checkpoint(
        format_version=header["format_version"],
        config=header["config"],
        tensors=tensors,
        optimizer_meta=header["optimizer"],
        iteration=header["iteration"],
    )


def _checkpoint_from_training(model: ColorLearner, optimizer, learner_config: LearnerConfig,
                              train_config: TrainConfig, spec: EpisodeSpec,
                              iteration: int) -> Checkpoint:
    tensors = {
        f"model.{k}": v.detach().cpu().numpy().copy()
        for k, v in model.state_dict().items()
    }
    steps = {}
    if optimizer is not None:
        state = optimizer.state_dict()["state"]
        for idx, entry in state.items():
            for key, val in entry.items():
                if torch.is_tensor(val) and val.dim() > 0:
                    tensors[f"optimizer.{idx}.{key}"] = val.detach().cpu().numpy().copy()
                else:
                    steps[f"{idx}.{key}"] = float(val)
    meta = {
        "steps": steps,
        "param_groups": [
            {k: v for k, v in g.items() if k != "params"}
            for g in (optimizer.state_dict()["param_groups"] if optimizer else [])
        ],
    }
    return Checkpoint(
        format_version=CHECKPOINT_VERSION,
        config={
            "learner": learner_config.to_dict(),
            "train": train_config.to_dict(),
            "spec": spec.to_dict(),
        },
        tensors=tensors,
        optimizer_meta=meta,
        iteration=iteration,
    )


def model_from_checkpoint(checkpoint: Checkpoint) -> ColorLearner:
    config = checkpoint.learner_config()
    model = ColorLearner(config)
    state = {}
    for name, arr in checkpoint.tensors.items():
        if name.startswith("model."):
            state[name[len("model."):]] = torch.as_tensor(arr)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match the stored config: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# Metrics records
# ---------------------------------------------------------------------------

class MetricsWriter:
    """Collects records and optionally streams them to a JSONL file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "w") if path is not None else None

    def emit(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def parse_metrics(path) -> list[dict]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: malformed metrics line {lineno}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# Training / evaluation / distillation
# ---------------------------------------------------------------------------

def _apply_determinism(config: TrainConfig) -> None:
    torch.use_deterministic_algorithms(config.deterministic)


def _episode_losses(model: ColorLearner, episode, spec: EpisodeSpec,
                    support_labels, query_labels) -> tuple[list[GenerationLosses], list]:
    states = model.forward_episode(episode, spec)
    per_gen = [
        GenerationLosses(
            l1=objective.matrix_class_loss(s.m1, support_labels, query_labels, spec),
            l2=objective.matrix_class_loss(s.m2, support_labels, query_labels, spec),
            l3=objective.matrix_class_loss(s.m3, support_labels, query_labels, spec),
            le=objective.embedding_sim_loss(s.e1, support_labels, query_labels, spec),
        )
        for s in states
    ]
    return per_gen, states


def _labels_tensors(episode):
    return (
        torch.as_tensor(episode.support_labels, dtype=torch.long),
        torch.as_tensor(episode.query_labels, dtype=torch.long),
    )


def evaluate_model(model: ColorLearner, source: EpisodeSource, spec: EpisodeSpec,
                   num_episodes: int, seed) -> EvalReport:
    rng = np.random.default_rng(seed)
    model.eval()
    accuracies = []
    with torch.no_grad():
        for _ in range(num_episodes):
            episode = source.sample(spec, rng)
            states = model.forward_episode(episode, spec)
            pred = predict_labels(states[-1].m1, spec)
            accuracies.append(float((pred == episode.query_labels).mean()))
    return EvalReport.from_accuracies(accuracies)


def evaluate(checkpoint: Checkpoint | str | Path, source: EpisodeSource, spec: EpisodeSpec,
             num_episodes: int = 600, seed: int = 0) -> EvalReport:
    """Episode-level accuracy of a stored model, reported with a 95% CI."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    model = model_from_checkpoint(checkpoint)
    return evaluate_model(model, source, spec, num_episodes, seed)


def _fit(model: ColorLearner, source: EpisodeSource, spec: EpisodeSpec,
         config: TrainConfig, writer: MetricsWriter, teacher: ColorLearner | None,
         gamma: float) -> torch.optim.Optimizer:
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    data_rng = np.random.default_rng(config.seed)
    distilling = teacher is not None and gamma != 0.0
    for iteration in range(1, config.iterations + 1):
        model.train()
        batch_terms = []
        color_terms = []
        episodes = [source.sample(spec, data_rng) for _ in range(config.batch_episodes)]
        for episode in episodes:
            support_labels, query_labels = _labels_tensors(episode)
            per_gen, states = _episode_losses(model, episode, spec, support_labels, query_labels)
            batch_terms.append(per_gen)
            if distilling:
                with torch.no_grad():
                    teacher_states = teacher.forward_episode(episode, spec)
                color_terms.append(
                    objective.distill_kl(
                        states[-1].e1,
                        teacher_states[-1].e1,
                        model.patterns.final_core_metric(),
                        teacher.patterns.final_core_metric(),
                        gamma,
                        spec,
                    )
                )
        l_cls = objective.total_loss(batch_terms, config.lam, config.beta)
        if distilling:
            l_color = color_terms[0]
            for extra in color_terms[1:]:
                l_color = l_color + extra
            loss = l_cls + l_color
        else:
            l_color = None
            loss = l_cls
        terms = objective.LossTerms.from_components(
            batch_terms, config.lam, config.beta, l_cls, gamma=gamma
        )
        if not torch.isfinite(loss):
            components = {"l_cls": terms.total, "generations": terms.per_generation}
            if l_color is not None:
                components["l_color"] = float(l_color.item())
            raise TrainingDivergedError(iteration, components)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        record = {
            "kind": "train",
            "iteration": iteration,
            "total": float(loss.item()),
            "generations": terms.per_generation,
        }
        if distilling:
            record["l_cls"] = terms.total
            record["l_color"] = float(l_color.item())
        writer.emit(record)
        if config.eval_every and iteration % config.eval_every == 0:
            report = evaluate_model(
                model, source, spec, config.eval_episodes, seed=(config.seed, iteration)
            )
            writer.emit(
                {
                    "kind": "eval",
                    "iteration": iteration,
                    "mean_accuracy": report.mean_accuracy,
                    "ci95_halfwidth": report.ci95_halfwidth,
                    "episodes": report.episodes_evaluated,
                }
            )
    return optimizer


def train(learner_config: LearnerConfig, spec: EpisodeSpec, source: EpisodeSource,
          config: TrainConfig, metrics_path=None) -> tuple[Checkpoint, list[dict]]:
    """Train a learner from scratch; returns the checkpoint and metric records."""
    _apply_determinism(config)
    learner_config = dataclasses.replace(learner_config, pattern_depth=config.pattern_depth)
    model = build_learner(learner_config, config.seed)
    writer = MetricsWriter(metrics_path)
    try:
        optimizer = _fit(model, source, spec, config, writer, teacher=None, gamma=0.0)
    finally:
        writer.close()
    checkpoint = _checkpoint_from_training(model, optimizer, learner_config, config, spec,
                                           config.iterations)
    return checkpoint, writer.records


def distill(teacher_checkpoint: Checkpoint | str | Path, spec: EpisodeSpec,
            source: EpisodeSource, config: TrainConfig,
            gamma: float = objective.DEFAULT_GAMMA,
            student_config: LearnerConfig | None = None,
            metrics_path=None) -> tuple[Checkpoint, list[dict]]:
    """Train an attention-free student against a frozen teacher."""
    if not isinstance(teacher_checkpoint, Checkpoint):
        teacher_checkpoint = load_checkpoint(teacher_checkpoint)
    teacher_spec = teacher_checkpoint.episode_spec()
    if (teacher_spec.ways, teacher_spec.shots, teacher_spec.queries) != (
        spec.ways, spec.shots, spec.queries
    ):
        raise ConfigurationError(
            f"teacher was trained on {teacher_spec.ways}-way {teacher_spec.shots}-shot "
            f"{teacher_spec.queries}-query episodes, distillation requested "
            f"{spec.ways}-way {spec.shots}-shot {spec.queries}-query"
        )
    _apply_determinism(config)
    teacher = model_from_checkpoint(teacher_checkpoint)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    if student_config is None:
        student_config = teacher_checkpoint.learner_config().student_variant(
            depth=config.pattern_depth
        )
    student_config = dataclasses.replace(student_config, pattern_depth=config.pattern_depth)
    student = build_learner(student_config, config.seed)
    writer = MetricsWriter(metrics_path)
    try:
        optimizer = _fit(student, source, spec, config, writer,
                         teacher=teacher if gamma != 0.0 else None, gamma=gamma)
    finally:
        writer.close()
    checkpoint = _checkpoint_from_training(student, optimizer, student_config, config, spec,
                                           config.iterations)
    return checkpoint, writer.records
