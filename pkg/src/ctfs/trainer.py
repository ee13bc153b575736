"""Training loop: supervised warm-up, then rotating-teacher consistency training."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import TEACHER_KIND, apply_general_weak, apply_strong, weak_view
from .config import ExperimentConfig, dump_config
from .losses import supervised_loss, total_loss, unsupervised_loss
from .metrics import evaluate_model, miou
from .model import (CheckpointError, NonFiniteLossError, build_model, make_optimizer,
                    model_from_state, model_state, save_model, train_step)
from .mvra import assess
from .synth import (DatasetError, DatasetSplit, build_partition, build_splits, load_dataset,
                    partition_path, read_partition, read_split, split_path, write_partition,
                    write_split)
from .teachers import SUPERVISED, TeacherBank, make_pseudo_label, schedule

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "CTFS_RUN_ROOT"
STATE_FORMAT = "ctfs-train-state"
STATE_VERSION = 1
LOG_FIELDS = ("epoch", "iteration", "active_teacher", "total", "sup", "unsup",
              "mean_reliability", "gated_fraction", "wall_time")
EPOCH_FIELDS = ("epoch", "active_teacher", "val_miou", "mean_reliability", "gated_fraction")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainLogRecord:
    epoch: int
    iteration: int
    active_teacher: str
    total: float
    sup: float
    unsup: float
    mean_reliability: float
    gated_fraction: float
    wall_time: float

    def to_line(self) -> str:
        vals = []
        for name in LOG_FIELDS:
            v = getattr(self, name)
            vals.append(repr(v) if isinstance(v, float) else str(v))
        return "\t".join(vals)


@dataclass
class RunSummary:
    run_dir: Path
    best_val_miou: float
    best_epoch: int
    checkpoint: Path
    best_checkpoint: Path
    history: list = field(default_factory=list)


def resolve_run_dir(cfg: ExperimentConfig) -> Path:
    path = Path(cfg.run_dir)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def prepare_partition(root, seed: int, dataset=None):
    """Persisted 6:2:2 train/val/test partition, created on first use."""
    root = Path(root)
    if partition_path(root, seed).exists():
        return read_partition(root, seed)
    ids = dataset.ids if dataset is not None else sorted(p.stem for p in (root / "images").glob("*.png"))
    part = build_partition(ids, seed)
    write_partition(root, part)
    return part


def prepare_split(root, ratio: float, seed: int, dataset=None):
    """Persisted (partition, labeled split); the labeled split is drawn from the train part."""
    part = prepare_partition(root, seed, dataset)
    if split_path(root, ratio, seed).exists():
        split = read_split(root, ratio, seed)
    else:
        split = build_splits(part.train, ratio, seed)
        write_split(root, split)
    return part, split


def _draw(pool, size: int, rng: np.random.Generator) -> list:
    if size == 0:
        return []
    if not pool:
        raise ValueError("cannot sample from an empty pool")
    idx = rng.choice(len(pool), size=size, replace=len(pool) < size)
    return [pool[i] for i in idx]


def sample_batch(split: DatasetSplit, sizes, rng: np.random.Generator, rng_unlabeled=None):
    """Random (labeled ids, unlabeled ids); with replacement only when a pool is too small."""
    n_lab, n_unl = sizes
    if n_lab and not split.labeled_ids:
        raise ValueError("labeled pool is empty")
    labeled = _draw(split.labeled_ids, n_lab, rng)
    unlabeled = _draw(split.unlabeled_ids, n_unl, rng_unlabeled if rng_unlabeled is not None else rng)
    return labeled, unlabeled


class Trainer:
    def __init__(self, cfg: ExperimentConfig, dataset=None):
        cfg.validate()
        self.cfg = cfg
        self.run_dir = resolve_run_dir(cfg)
        try:
            self.dataset = dataset if dataset is not None else load_dataset(cfg.data_dir)
            self.partition, self.split = prepare_split(cfg.data_dir, cfg.ratio, cfg.split_seed, self.dataset)
        except (OSError, FileExistsError) as exc:
            raise DatasetError(str(exc)) from exc
        for sid in self.split.labeled_ids + self.partition.val:
            if sid not in self.dataset.masks:
                raise DatasetError(f"{sid} needs a mask but has none")
        h, w = self.dataset.images[self.dataset.ids[0]].shape
        if h % cfg.grid or w % cfg.grid:
            raise DatasetError(f"images {h}x{w} are not divisible by grid size {cfg.grid}")
        self.num_classes = self.dataset.num_classes
        self.aug_cfg = cfg.augment_config()
        self.loss_cfg = cfg.loss_config()
        self.mvra_cfg = cfg.mvra_config()

        init_seq, lab_seq, unl_seq, mvra_seq = np.random.SeedSequence(cfg.seed).spawn(4)
        self.student = build_model(self.num_classes, cfg.widths, seed=int(init_seq.generate_state(1)[0]))
        self.optimizer = make_optimizer(self.student, cfg.encoder_lr, cfg.decoder_lr, cfg.weight_decay)
        self.rng_lab = np.random.default_rng(lab_seq)
        self.rng_unl = np.random.default_rng(unl_seq)
        self.rng_mvra = np.random.default_rng(mvra_seq)
        self.bank: TeacherBank | None = None
        self.start_epoch = 0
        self.best = (-1.0, -1)
        self.history: list[dict] = []

    # ------------------------------------------------------------ schedule

    def active(self, epoch: int) -> str:
        tag = schedule(epoch, self.cfg.warmup)
        if tag != SUPERVISED and self.cfg.rotation == "general":
            return "general"
        return tag

    # --------------------------------------------------------- persistence

    @property
    def checkpoint_path(self) -> Path:
        return self.run_dir / "checkpoint.pt"

    @property
    def best_path(self) -> Path:
        return self.run_dir / "best.pt"

    def state(self, epoch: int) -> dict:
        return {
            "format": STATE_FORMAT,
            "version": STATE_VERSION,
            "epoch": epoch,
            "num_classes": self.num_classes,
            "student": model_state(self.student),
            "optimizer": self.optimizer.state_dict(),
            "bank": self.bank.state() if self.bank is not None else None,
            "rng": {name: getattr(self, name).bit_generator.state
                    for name in ("rng_lab", "rng_unl", "rng_mvra")},
            "best": self.best,
            "history": self.history,
            "config": dump_config(self.cfg),
        }

    def save_checkpoint(self, epoch: int, path=None) -> Path:
        path = Path(path) if path is not None else self.checkpoint_path
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        torch.save(self.state(epoch), tmp)
        tmp.replace(path)
        return path

    def load_checkpoint(self, path=None) -> int:
        path = Path(path) if path is not None else self.checkpoint_path
        if not path.exists():
            raise CheckpointError(f"no checkpoint at {path}")
        st = torch.load(path, map_location="cpu", weights_only=False)
        if st.get("format") != STATE_FORMAT or st.get("version") != STATE_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint header "
                                  f"{st.get('format')!r} v{st.get('version')!r}")
        if st["num_classes"] != self.num_classes:
            raise CheckpointError(f"checkpoint has {st['num_classes']} classes, "
                                  f"dataset has {self.num_classes}")
        self.student.load_state_dict(model_from_state(st["student"], self.num_classes).state_dict())
        self.optimizer.load_state_dict(st["optimizer"])
        self.bank = TeacherBank.from_state(st["bank"], self.num_classes) if st["bank"] else None
        for name, s in st["rng"].items():
            getattr(self, name).bit_generator.state = s
        self.best = tuple(st["best"])
        self.history = list(st["history"])
        self.start_epoch = st["epoch"] + 1
        return st["epoch"]

    # ------------------------------------------------------------ batches

    def _labeled_batch(self, ids):
        imgs, masks = [], []
        for sid in ids:
            img, mask, _ = apply_general_weak(self.dataset.images[sid], self.dataset.masks[sid],
                                              cfg=self.aug_cfg, rng=self.rng_lab)
            imgs.append(img)
            masks.append(mask)
        return (torch.from_numpy(np.stack(imgs)).float()[:, None],
                torch.from_numpy(np.stack(masks).astype(np.int64)))

    def _unlabeled_batch(self, ids, tag: str):
        """Weak views (teacher), strong-on-weak views (student), geometry records."""
        weak, strong, records = [], [], []
        kind = TEACHER_KIND[tag]
        for sid in ids:
            img, _, rec = weak_view(kind, self.dataset.images[sid], None, self.rng_unl, self.aug_cfg)
            weak.append(img)
            strong.append(apply_strong(img, cfg=self.aug_cfg, rng=self.rng_unl))
            records.append(rec)
        originals = np.stack([self.dataset.images[sid] for sid in ids])
        return np.stack(weak), np.stack(strong), records, originals

    @torch.no_grad()
    def _targets(self, ids, tag):
        weak, strong, records, originals = self._unlabeled_batch(ids, tag)
        teacher_probs = self.bank.predict(tag, weak)
        target = teacher_probs if self.cfg.soft_targets else make_pseudo_label(teacher_probs)
        if self.cfg.use_mvra:
            rel = assess(self.bank, originals, self.mvra_cfg, rng=self.rng_mvra, aug_cfg=self.aug_cfg)
            pix = rel.pixel_scores.numpy()
            pix = np.stack([rec.apply(p, nearest=True) for rec, p in zip(records, pix)])
            reliability = torch.from_numpy(pix).float()
        else:
            reliability = torch.ones(len(ids), *weak.shape[-2:])
        return torch.from_numpy(strong).float()[:, None], target, reliability

    # ---------------------------------------------------------------- run

    def _prepare_logs(self, resume: bool) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.resolved.cfg").write_text(dump_config(self.cfg))
        for name, fields_ in (("train_log.tsv", LOG_FIELDS), ("epochs.csv", EPOCH_FIELDS)):
            path = self.run_dir / name
            sep = "\t" if name.endswith(".tsv") else ","
            header = sep.join(fields_)
            keep = [header]
            if resume and path.exists():
                for line in path.read_text().splitlines()[1:]:
                    if line and int(line.split(sep, 1)[0]) < self.start_epoch:
                        keep.append(line)
            path.write_text("\n".join(keep) + "\n")

    def run(self, resume: bool = False) -> RunSummary:
        cfg = self.cfg
        if resume:
            self.load_checkpoint()
        self._prepare_logs(resume)
        t0 = time.perf_counter()
        log_fh = (self.run_dir / "train_log.tsv").open("a")
        try:
            for epoch in range(self.start_epoch, cfg.epochs):
                self._run_epoch(epoch, log_fh, t0)
        finally:
            log_fh.close()
        if not self.best_path.exists():
            save_model(self.student, self.best_path)
        return RunSummary(self.run_dir, self.best[0], self.best[1], self.checkpoint_path,
                          self.best_path, list(self.history))

    def _run_epoch(self, epoch: int, log_fh, t0: float) -> None:
        cfg = self.cfg
        tag = self.active(epoch)
        if tag != SUPERVISED and self.bank is None:
            self.bank = TeacherBank.from_student(self.student, cfg.ema_decay, cfg.warmup)
        unsup_on = tag != SUPERVISED and cfg.lambda_u > 0
        if tag == SUPERVISED:
            n_iter = math.ceil(len(self.split.labeled_ids) / cfg.batch_labeled)
        else:
            n_iter = math.ceil(len(self.split.unlabeled_ids) / cfg.batch_unlabeled)
        rel_sum = gate_sum = 0.0
        for it in range(n_iter):
            lab_ids, unl_ids = sample_batch(
                self.split, (cfg.batch_labeled, cfg.batch_unlabeled if unsup_on else 0),
                self.rng_lab, self.rng_unl)
            lab_x, lab_y = self._labeled_batch(lab_ids)
            if unsup_on:
                strong_x, target, reliability = self._targets(unl_ids, tag)
                mean_rel = float(reliability.mean())
            else:
                strong_x = target = reliability = None
                mean_rel = float("nan")

            def loss_fn(net, _batch):
                x = lab_x if strong_x is None else torch.cat([lab_x, strong_x])
                probs = torch.softmax(net(x), dim=1)
                sup = supervised_loss(probs[:len(lab_x)], lab_y)
                if strong_x is None:
                    return total_loss(sup, torch.zeros(()), self.loss_cfg, 0.0)
                unsup, gated = unsupervised_loss(probs[len(lab_x):], target, reliability, self.loss_cfg)
                return total_loss(sup, unsup, self.loss_cfg, gated)

            try:
                _, report = train_step(self.student, self.optimizer, loss_fn, lab_ids)
            except NonFiniteLossError as exc:
                dump = self.save_checkpoint(epoch, self.run_dir / "failure_state.pt")
                raise TrainingError(f"epoch {epoch} iteration {it}: {exc}; state dumped to {dump}") from exc
            except RuntimeError as exc:
                raise TrainingError(f"epoch {epoch} iteration {it}: {exc}") from exc
            if tag != SUPERVISED:
                self.bank.ema_update(tag, self.student)
            rec = TrainLogRecord(epoch, it, tag, report.total, report.sup, report.unsup,
                                 mean_rel, report.gated_fraction, round(time.perf_counter() - t0, 3))
            log_fh.write(rec.to_line() + "\n")
            if unsup_on:
                rel_sum += mean_rel
                gate_sum += report.gated_fraction
        log_fh.flush()

        cm = evaluate_model(self.student, self.dataset, self.partition.val)
        val = miou(cm)[1]
        if val > self.best[0]:
            self.best = (val, epoch)
            save_model(self.student, self.best_path)
        row = {
            "epoch": epoch,
            "active_teacher": tag,
            "val_miou": val,
            "mean_reliability": rel_sum / n_iter if unsup_on else float("nan"),
            "gated_fraction": gate_sum / n_iter if unsup_on else float("nan"),
        }
        self.history.append(row)
        with (self.run_dir / "epochs.csv").open("a", newline="") as fh:
            csv.writer(fh).writerow([row[k] for k in EPOCH_FIELDS])
        log.info("epoch %d [%s] val mIoU %.4f", epoch, tag, val)
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
            self.save_checkpoint(epoch)


def run_experiment(cfg: ExperimentConfig, resume: bool = False, dataset=None) -> RunSummary:
    return Trainer(cfg, dataset).run(resume=resume)


def read_train_log(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:] if line]


def summary_dict(summary: RunSummary) -> dict:
    d = asdict(summary)
    return {k: str(v) if isinstance(v, Path) else v for k, v in d.items()}
