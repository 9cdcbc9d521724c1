"""Batch jobs behind the command line: one tracked task per image, run on a worker pool."""
from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from ..core import netpbm
from ..core.config import PipelineConfig, with_overrides
from ..core.dataset import Sample, export_split, load_split, sample_paths, synth_dataset
from ..core.errors import FormatError, UsageError
from ..core.explain import CLASS_AGNOSTIC, get_explainer
from ..core.label import PseudoLabel, epom_no_saliency, epom_refine, initial_label_without_saliency, initial_pseudo_label
from ..core.metrics import ConfusionMatrix, MetricsReport
from ..core.refine import RefinedAttentionStack, refine_maps, rescale_image, to_pgm_bytes
from ..core.train import EpochStats, evaluate_accuracy, train
from ..core.utils import ensure_directory
from ..core.vit import ViTModel, build_model, load_weights, save_weights
from ..hooks import trigger_hook

logger = logging.getLogger(__name__)

SPLITS = ("train", "val")
T = TypeVar("T")


class TaskStatus(str, Enum):
    PENDING = "pending"
    PROCESSING = "processing"
    COMPLETED = "completed"
    FAILED = "failed"


class Task(BaseModel):
    task_id: str
    kind: str
    status: TaskStatus = TaskStatus.PENDING
    created_at: datetime = Field(default_factory=datetime.utcnow)
    started_at: Optional[datetime] = None
    completed_at: Optional[datetime] = None
    result: Optional[Dict[str, Any]] = None
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "kind": self.kind,
            "status": self.status.value,
            "created_at": self.created_at.isoformat(),
            "started_at": self.started_at.isoformat() if self.started_at else None,
            "completed_at": self.completed_at.isoformat() if self.completed_at else None,
            "result": self.result or {},
            "error": self.error,
        }


class TaskManager:
    """Task records of one run; safe to update from worker threads."""

    def __init__(self) -> None:
        self._tasks: Dict[str, Task] = {}
        self._lock = threading.Lock()

    def create_task(self, task_id: str, kind: str) -> Task:
        task = Task(task_id=task_id, kind=kind)
        with self._lock:
            self._tasks[task_id] = task
        return task

    def get_task(self, task_id: str) -> Optional[Task]:
        with self._lock:
            return self._tasks.get(task_id)

    def update_task_status(self, task_id: str, status: TaskStatus, **kwargs: Any) -> Optional[Task]:
        with self._lock:
            task = self._tasks.get(task_id)
            if not task:
                return None
            previous_status = task.status
            task.status = status
            if status == TaskStatus.PROCESSING and not task.started_at:
                task.started_at = datetime.utcnow()
            elif status in {TaskStatus.COMPLETED, TaskStatus.FAILED}:
                task.completed_at = datetime.utcnow()
            for key, value in kwargs.items():
                if hasattr(task, key):
                    setattr(task, key, value)
            record = task.to_dict()

        if status == TaskStatus.PROCESSING and previous_status != TaskStatus.PROCESSING:
            trigger_hook("start", record)
        elif status == TaskStatus.COMPLETED:
            trigger_hook("complete", record)
        elif status == TaskStatus.FAILED:
            trigger_hook("error", record)
        return task

    def tasks(self) -> List[Task]:
        with self._lock:
            return [self._tasks[k] for k in sorted(self._tasks)]

    def failures(self) -> Dict[str, str]:
        return {t.task_id: t.error or "" for t in self.tasks() if t.status == TaskStatus.FAILED}


@dataclass
class BatchResult:
    """Per-image outputs in sample order, plus the images that failed."""

    outputs: Dict[str, Any] = field(default_factory=dict)
    failures: Dict[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_batch(
    samples: Sequence[Sample],
    job: Callable[[Sample], T],
    workers: int,
    kind: str,
    progress: bool = False,
    manager: Optional[TaskManager] = None,
) -> BatchResult:
    """Run ``job`` on every sample; a failing image is recorded and the rest carry on."""
    manager = manager or TaskManager()
    for sample in samples:
        manager.create_task(sample.name, kind)

    def tracked(sample: Sample) -> T:
        manager.update_task_status(sample.name, TaskStatus.PROCESSING)
        output = job(sample)
        manager.update_task_status(sample.name, TaskStatus.COMPLETED, result={"sample": sample.name})
        return output

    collected: Dict[str, Any] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {pool.submit(tracked, sample): sample.name for sample in samples}
        for future in tqdm(as_completed(futures), total=len(futures), desc=kind, disable=not progress):
            name = futures[future]
            try:
                collected[name] = future.result()
            except Exception as exc:
                logger.error("Error processing %s: %s", name, exc)
                manager.update_task_status(name, TaskStatus.FAILED, error=str(exc))

    result = BatchResult(
        outputs={name: collected[name] for name in sorted(collected)},
        failures=manager.failures(),
    )
    logger.info("%s: %d processed, %d failed", kind, len(result.outputs), len(result.failures))
    return result


# --- per-image pseudo labelling -----------------------------------------


@dataclass
class LabelOutcome:
    name: str
    present_classes: List[int]
    label: PseudoLabel
    maps: RefinedAttentionStack

    def sidecar(self) -> Dict[str, Any]:
        return self.label.sidecar(self.present_classes)


def inference_images(image: np.ndarray, config: PipelineConfig) -> List[np.ndarray]:
    """The image at every inference scale, sides rounded to the patch size."""
    _, h, w = image.shape
    base = config.refine.long_side / max(h, w) if config.refine.long_side else 1.0
    scales = config.refine.scales if config.refine.multi_scale else [1.0]
    return [rescale_image(image, base * s, config.model.patch_size) for s in scales]


def explain_classes(
    model: ViTModel, sample: Sample, config: PipelineConfig
) -> Dict[int, Union[np.ndarray, List[np.ndarray]]]:
    """Patch-grid maps for the classes named by the image-level labels only."""
    name = config.explain.explainer
    explainer = get_explainer(name)
    relevance = config.explain.relevance()
    images = inference_images(sample.image, config)
    shared: Dict[int, np.ndarray] = {}
    initial: Dict[int, Union[np.ndarray, List[np.ndarray]]] = {}
    for class_id in sample.present_classes:
        grids = []
        for scale, image in enumerate(images):
            if name in CLASS_AGNOSTIC and scale in shared:
                grids.append(shared[scale])
                continue
            grid = explainer(model, image, class_id - 1, relevance).grid
            if name in CLASS_AGNOSTIC:
                shared[scale] = grid
            grids.append(grid)
        initial[class_id] = grids[0] if len(grids) == 1 else grids
    return initial


def label_sample(model: ViTModel, sample: Sample, config: PipelineConfig) -> LabelOutcome:
    """Explain, refine, label and (optionally) mine potential objects for one image."""
    present = sample.present_classes
    height, width = sample.size
    maps = refine_maps(
        explain_classes(model, sample, config),
        height,
        width,
        rate=config.refine.sr,
        erase=config.refine.soft_erase,
    )
    options = config.label
    if options.saliency:
        if sample.saliency is None:
            raise FormatError(f"sample {sample.name} has no saliency map")
        label = initial_pseudo_label(maps, sample.saliency, present, options)
        if options.epom:
            label = epom_refine(label, maps, present, options)
    elif options.epom:
        label = epom_no_saliency(maps, present, (height, width), options)
    else:
        label = initial_label_without_saliency(maps, present, (height, width), options)
    return LabelOutcome(sample.name, present, label, maps)


def write_outcome(outcome: LabelOutcome, directory: Path) -> None:
    """``mask_XXXX.pgm``, ``thr_XXXX.json`` and one ``heat_XXXX_c<id>.pgm`` per class."""
    netpbm.write_pgm(sample_paths(directory, outcome.name)["mask"], outcome.label.grid)
    write_json(directory / f"thr_{outcome.name}.json", outcome.sidecar())
    for class_id, attention in outcome.maps.maps.items():
        (directory / f"heat_{outcome.name}_c{class_id}.pgm").write_bytes(to_pgm_bytes(attention))


def score_outcomes(
    outcomes: Dict[str, LabelOutcome], samples: Sequence[Sample], num_classes: int
) -> MetricsReport:
    """Pseudo-label quality against ground truth; samples without a label or mask are listed as missing."""
    cm = ConfusionMatrix(num_classes)
    missing: List[str] = []
    for sample in samples:
        outcome = outcomes.get(sample.name)
        if outcome is None or sample.gt_mask is None:
            missing.append(sample.name)
            continue
        cm.accumulate(outcome.label.grid, sample.gt_mask)
    return cm.report(missing)


# --- commands ---------------------------------------------------------------


def write_json(path: Union[str, Path], data: Any) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def split_seed(seed: int, split: str) -> int:
    """Independent seed per split derived from the run seed."""
    return int(np.random.SeedSequence([seed, SPLITS.index(split)]).generate_state(1)[0])


def split_dir(config: PipelineConfig, split: str) -> Path:
    return Path(config.paths.dataset_dir) / split


def select(samples: List[Sample], count: Optional[int]) -> List[Sample]:
    return samples if count is None else samples[:count]


def run_gen_data(config: PipelineConfig, splits: Sequence[str] = SPLITS) -> Dict[str, int]:
    counts = {"train": config.data.train_count, "val": config.data.val_count}
    written: Dict[str, int] = {}
    for split in splits:
        samples = synth_dataset(counts[split], config.data.synth, split_seed(config.seed, split))
        export_split(samples, split_dir(config, split))
        written[split] = len(samples)
    return written


@dataclass
class TrainRun:
    history: List[EpochStats]
    weights: Path
    metrics: Path
    val_accuracy: Optional[float] = None


def run_train(config: PipelineConfig, progress: bool = False) -> TrainRun:
    samples = load_split(split_dir(config, "train"))
    model = build_model(config.model, config.seed)
    trained, history = train(model, samples, config.train, progress=progress)
    weights = save_weights(trained, config.paths.weights)

    val_accuracy = None
    val_dir = split_dir(config, "val")
    if val_dir.is_dir():
        val_samples = load_split(val_dir)
        if val_samples:
            val_accuracy = evaluate_accuracy(trained, val_samples)
            logger.info("validation macro accuracy %.4f", val_accuracy)

    output = ensure_directory(config.paths.output_dir)
    metrics = write_json(
        output / "train_metrics.json",
        {"epochs": [stats.dict() for stats in history], "val_accuracy": val_accuracy},
    )
    return TrainRun(history, weights, metrics, val_accuracy)


def label_split(
    model: ViTModel,
    samples: Sequence[Sample],
    config: PipelineConfig,
    progress: bool = False,
    on_outcome: Optional[Callable[[LabelOutcome], None]] = None,
) -> BatchResult:
    def job(sample: Sample) -> LabelOutcome:
        outcome = label_sample(model, sample, config)
        if on_outcome is not None:
            on_outcome(outcome)
        return outcome

    return run_batch(samples, job, config.worker_count(), "pseudo-label", progress)


def pseudo_label_dir(config: PipelineConfig, split: str) -> Path:
    return Path(config.paths.output_dir) / f"pseudo_{split}"


def run_pseudo_label(
    config: PipelineConfig, split: str = "val", count: Optional[int] = None, progress: bool = False
) -> Tuple[Path, BatchResult]:
    model = load_weights(config.paths.weights)
    samples = select(load_split(split_dir(config, split)), count)
    directory = ensure_directory(pseudo_label_dir(config, split))
    result = label_split(model, samples, config, progress, lambda o: write_outcome(o, directory))
    return directory, result


def evaluate_dirs(pred_dir: Union[str, Path], gt_dir: Union[str, Path], num_classes: int) -> MetricsReport:
    """Score every ``mask_XXXX.pgm`` in ``gt_dir`` against its namesake in ``pred_dir``."""
    gt_files = sorted(Path(gt_dir).glob("mask_*.pgm"))
    if not gt_files:
        raise UsageError(f"no ground-truth masks in {gt_dir}")
    cm = ConfusionMatrix(num_classes)
    missing: List[str] = []
    for gt_path in gt_files:
        pred_path = Path(pred_dir) / gt_path.name
        if not pred_path.exists():
            missing.append(gt_path.name)
            continue
        cm.accumulate(netpbm.read_pgm(pred_path), netpbm.read_pgm(gt_path))
    if missing:
        logger.warning("%d predictions missing from %s", len(missing), pred_dir)
    return cm.report(missing)


def run_eval(
    config: PipelineConfig,
    pred_dir: Optional[Union[str, Path]] = None,
    gt_dir: Optional[Union[str, Path]] = None,
    split: str = "val",
) -> Tuple[Path, MetricsReport]:
    pred_dir = pred_dir or pseudo_label_dir(config, split)
    gt_dir = gt_dir or split_dir(config, split)
    report = evaluate_dirs(pred_dir, gt_dir, config.model.num_classes)
    output = ensure_directory(config.paths.output_dir)
    return write_json(output / "metrics.json", report.dict()), report


@dataclass
class StudyResult:
    """mIoU per named variant and the images any variant failed on."""

    scores: Dict[str, Optional[float]]
    reports: Dict[str, MetricsReport]
    failures: Dict[str, Dict[str, str]]

    @property
    def ok(self) -> bool:
        return not any(self.failures.values())


def run_study(
    config: PipelineConfig,
    variants: Dict[str, Dict[str, Any]],
    split: str = "val",
    count: Optional[int] = None,
    progress: bool = False,
) -> StudyResult:
    """Label one split under each configuration variant and score every variant."""
    model = load_weights(config.paths.weights)
    samples = select(load_split(split_dir(config, split)), count)
    scores: Dict[str, Optional[float]] = {}
    reports: Dict[str, MetricsReport] = {}
    failures: Dict[str, Dict[str, str]] = {}
    for name, overrides in variants.items():
        variant = with_overrides(config, overrides)
        result = label_split(model, samples, variant, progress)
        report = score_outcomes(result.outputs, samples, config.model.num_classes)
        scores[name], reports[name], failures[name] = report.miou, report, result.failures
        logger.info("%s: mIoU %s", name, report.miou)
    return StudyResult(scores, reports, failures)


def compare_variants() -> Dict[str, Dict[str, Any]]:
    return {name: {"explain.explainer": name} for name in ("dtd", "rollout", "cam")}


def ablation_variants() -> Dict[str, Dict[str, Any]]:
    return {
        "dtd_last_block": {"explain.explainer": "dtd", "explain.blocks": "last"},
        "dtd_all_blocks": {"explain.explainer": "dtd", "explain.blocks": "all"},
        "saliency_epom": {"explain.explainer": "dtd", "label.saliency": True, "label.epom": True},
        "no_saliency_epom": {"explain.explainer": "dtd", "label.saliency": False, "label.epom": True},
        "soft_erase_on": {"explain.explainer": "dtd", "refine.soft_erase": True},
        "soft_erase_off": {"explain.explainer": "dtd", "refine.soft_erase": False},
        "epom_on": {"explain.explainer": "dtd", "label.epom": True},
        "epom_off": {"explain.explainer": "dtd", "label.epom": False},
    }


def run_compare(
    config: PipelineConfig, split: str = "val", count: Optional[int] = None, progress: bool = False
) -> Tuple[Path, StudyResult]:
    study = run_study(config, compare_variants(), split, count, progress)
    output = ensure_directory(config.paths.output_dir)
    return write_json(output / "compare.json", study.scores), study


def run_ablate(
    config: PipelineConfig, split: str = "val", count: Optional[int] = None, progress: bool = False
) -> Tuple[Path, StudyResult]:
    study = run_study(config, ablation_variants(), split, count, progress)
    output = ensure_directory(config.paths.output_dir)
    return write_json(output / "ablate.json", study.scores), study
