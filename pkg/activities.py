import asyncio
from dataclasses import dataclass
from pathlib import Path

from temporalio import activity
from temporalio.exceptions import ApplicationError

from augment import Task
from codec import Codec
from errors import CodecError
from evaluation import run_evaluation
from trainer import MetricsLog, Phase, TrainConfig, run_single_phase


@dataclass
class TrainingRequest:
    config_path: str
    out_dir: str
    adversarial: bool = False
    evaluate: bool = True
    eval_count: int = 50
    eval_seed: int = 0


@dataclass
class PhaseRequest:
    phase: str
    config_path: str
    out_dir: str
    resume: str | None = None


@dataclass
class PhaseResult:
    phase: str
    checkpoint: str
    global_step: int
    last_losses: dict


@dataclass
class EvaluationRequest:
    checkpoint: str
    out_dir: str
    count: int = 50
    seed: int = 0
    plot: bool = False


def _non_retryable(e: CodecError) -> ApplicationError:
    return ApplicationError(str(e), type=type(e).__name__, non_retryable=True)


# === TRAINING ===

@activity.defn
async def run_training_phase(request: PhaseRequest) -> PhaseResult:
    """Run one training phase in a worker thread and checkpoint it."""
    activity.logger.info(f"\n{'='*60}\n[PHASE START] {request.phase} -> {request.out_dir}\n{'='*60}")
    try:
        config = TrainConfig.load(request.config_path)
        path, state = await asyncio.to_thread(run_single_phase, config, Phase(request.phase),
                                              request.out_dir, request.resume)
    except CodecError as e:
        activity.logger.error(f"Phase {request.phase} failed: {e}")
        raise _non_retryable(e) from e

    metrics = Path(request.out_dir) / "metrics.jsonl"
    records = MetricsLog.read(metrics) if metrics.exists() else []
    last = records[-1] if records else {}
    activity.logger.info(f"✓ {request.phase} finished at global step {state.global_step}: {path}")
    return PhaseResult(phase=request.phase, checkpoint=str(path), global_step=state.global_step, last_losses=last)


# === EVALUATION ===

@activity.defn
async def evaluate_checkpoint(request: EvaluationRequest) -> list[str]:
    """Denoise report for noise codecs; swap experiment and weight sweep for reverb codecs."""
    try:
        codec = Codec.load(request.checkpoint)
        kinds = ["denoise"] if codec.config.task is Task.NOISE else ["swap", "sweep"]
        written = []
        for kind in kinds:
            activity.logger.info(f"Running {kind} evaluation on {request.count} held-out items")
            paths = await asyncio.to_thread(run_evaluation, kind, codec, request.out_dir, request.count,
                                            request.seed, plot=request.plot)
            written.extend(str(p) for p in paths)
    except CodecError as e:
        activity.logger.error(f"Evaluation of {request.checkpoint} failed: {e}")
        raise _non_retryable(e) from e
    return written
