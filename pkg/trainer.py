"""
Mask-and-swap training.

Each iteration reconstructs, for every pair in the minibatch:
  (i)   x_A from its full embedding (target x_A);
  (ii)  x_A with the environment partition masked (target: clean speech);
  (iii) the receiver side with the donor's environment partition (target: the
        transplanted waveform).
The three reconstruction losses (spectral, by default relative to an
all-zero output plus a waveform L1 term) are summed into one clipped Adam
step. The optional adversarial phase freezes encoder and quantizers and
trains the decoder against multi-scale waveform discriminators on the
step-(i) output.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

import autodiff as ad
from augment import CorpusConfig, NoiseMixParams, TrainingPair, build_corpus, crop_pair, make_pair
from checkpoint import read_checkpoint, restore_store
from codec import Codec, CodecConfig, CausalConv, PartitionedEmbeddings, mask_partition, preset, swap_partition
from dsp import Waveform, spectral_loss
from errors import ConfigError, ContractViolation, TrainingAbort

logger = logging.getLogger(__name__)

DISCRIMINATOR_SCALES = (1, 2, 4)
# (in channels, out channels, kernel, stride) per discriminator layer
DISCRIMINATOR_LAYERS = ((1, 16, 15, 1), (16, 32, 11, 4), (32, 32, 11, 4), (32, 1, 3, 1))
# Adam step size for the few-hundred-step toy presets
DESK_LEARNING_RATE = 1e-3


class Phase(str, Enum):
    RECONSTRUCTION = "reconstruction"
    ADVERSARIAL = "adversarial"


@dataclass(frozen=True)
class TrainSchedule:
    phase: Phase
    steps: int
    frozen_prefixes: tuple[str, ...] = ()
    freeze_quantizers: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"phase step count must be >= 0, got {self.steps}")
        if self.phase is Phase.ADVERSARIAL:
            prefixes = tuple(dict.fromkeys(self.frozen_prefixes + ("encoder.",)))
            object.__setattr__(self, "frozen_prefixes", prefixes)
            object.__setattr__(self, "freeze_quantizers", True)

    @classmethod
    def for_phase(cls, phase: Phase, steps: int) -> "TrainSchedule":
        return cls(phase=phase, steps=steps)


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "noise-toy"
    codec: dict | None = None
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    noise: NoiseMixParams = field(default_factory=NoiseMixParams)
    phase1_steps: int = 500
    phase2_steps: int = 0
    adversarial: bool = False
    batch_pairs: int = 2
    crop_frames: int = 96
    adam: ad.AdamConfig = field(default_factory=lambda: ad.AdamConfig(lr=DESK_LEARNING_RATE))
    grad_clip: float | None = 1.0
    relative_losses: bool = True
    lambda_wave: float = 1.0
    lambda_adv: float = 1.0
    lambda_feat: float = 100.0
    log_every: int = 10

    def __post_init__(self):
        if self.batch_pairs < 1 or self.crop_frames < 1:
            raise ConfigError(f"batch_pairs and crop_frames must be >= 1, got {self.batch_pairs}, {self.crop_frames}")
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0.0:
            raise ConfigError(f"grad_clip must be > 0 or null, got {self.grad_clip}")
        if self.lambda_wave < 0.0:
            raise ConfigError(f"lambda_wave must be >= 0, got {self.lambda_wave}")

    def codec_config(self) -> CodecConfig:
        return CodecConfig.from_dict(self.codec) if self.codec else preset(self.preset)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["corpus"] = self.corpus.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        fields = dict(data)
        try:
            if "corpus" in fields:
                fields["corpus"] = CorpusConfig.from_dict(fields["corpus"])
            if "noise" in fields:
                fields["noise"] = NoiseMixParams(**fields["noise"])
            if "adam" in fields:
                fields["adam"] = ad.AdamConfig(**fields["adam"])
            return cls(**fields)
        except TypeError as e:
            raise ConfigError(f"invalid training config: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read training config {path}: {e}") from e
        return cls.from_dict(data)


@dataclass(frozen=True)
class TrainingState:
    global_step: int = 0
    phase: str = Phase.RECONSTRUCTION.value
    phase_step: int = 0
    phase1_complete: bool = False
    phase2_complete: bool = False

    def advanced(self, phase: Phase) -> "TrainingState":
        phase_step = self.phase_step + 1 if self.phase == phase.value else 1
        return replace(self, global_step=self.global_step + 1, phase=phase.value, phase_step=phase_step)


@dataclass(frozen=True, eq=False)
class TrainStepBatch:
    """Decoded outputs of steps (i), (ii), (iii) and their targets for one pair."""
    outputs: tuple[np.ndarray, np.ndarray, np.ndarray]
    targets: tuple[np.ndarray, np.ndarray, np.ndarray]


@dataclass
class LossBreakdown:
    step: int
    phase: str
    rec_i: float
    rec_ii: float
    rec_iii: float
    total: float
    adversarial: float = 0.0
    feature: float = 0.0
    discriminator: float = 0.0
    batches: list[TrainStepBatch] = field(default_factory=list, repr=False)

    def to_record(self) -> dict:
        record = asdict(self)
        record.pop("batches")
        return record


# === DISCRIMINATORS ===

class Discriminator:
    """Waveform discriminators at several average-pool factors, exposing every layer's features."""

    def __init__(self, scales: tuple[int, ...] = DISCRIMINATOR_SCALES, seed: int = 0):
        self.scales = scales
        self.params = ad.ParameterStore()
        self.layers = {f: [CausalConv(f"disc.scale{f}.layer{i}", cin, cout, k, s)
                           for i, (cin, cout, k, s) in enumerate(DISCRIMINATOR_LAYERS)]
                       for f in scales}
        rng = np.random.default_rng((seed, 7))
        for layers in self.layers.values():
            for conv in layers:
                conv.init(self.params, rng)

    def features(self, x: ad.Tensor) -> list[list[ad.Tensor]]:
        """Per scale, the activations of every layer; the last entry is the logit map."""
        column = ad.reshape(x, (x.shape[0], 1))
        out = []
        for f, layers in self.layers.items():
            h = ad.avg_pool(column, f) if f > 1 else column
            maps = []
            for i, conv in enumerate(layers):
                h = conv(self.params, h)
                if i < len(layers) - 1:
                    h = ad.elu(h)
                maps.append(h)
            out.append(maps)
        return out


def _signal(x) -> ad.Tensor:
    if isinstance(x, ad.Tensor):
        return x
    if isinstance(x, Waveform):
        return ad.Tensor(x.samples)
    return ad.Tensor(np.asarray(x, dtype=np.float64))


def _mean(terms: list[ad.Tensor]) -> ad.Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def adversarial_losses(real, fake, d: Discriminator) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Hinge (d_loss, g_loss) and the feature-matching loss, each averaged over scales/layers."""
    real, fake = _signal(real), _signal(fake)
    if real.shape != fake.shape:
        raise ContractViolation(f"adversarial_losses: length mismatch {real.shape} vs {fake.shape}")
    real_maps, fake_maps = d.features(real), d.features(fake)
    d_terms, g_terms, feature_terms = [], [], []
    for real_scale, fake_scale in zip(real_maps, fake_maps):
        d_terms.append(ad.relu(1.0 - real_scale[-1]).mean() + ad.relu(1.0 + fake_scale[-1]).mean())
        g_terms.append(ad.relu(1.0 - fake_scale[-1]).mean())
        for a, b in zip(real_scale[:-1], fake_scale[:-1]):
            feature_terms.append(ad.absolute(a - b).mean())
    return _mean(d_terms), _mean(g_terms), _mean(feature_terms)


# === ONE ITERATION ===

@dataclass
class PairForward:
    embeddings: tuple[PartitionedEmbeddings, PartitionedEmbeddings]
    outputs: tuple[ad.Tensor, ad.Tensor, ad.Tensor]
    targets: tuple[np.ndarray, np.ndarray, np.ndarray]
    losses: tuple[ad.Tensor, ad.Tensor, ad.Tensor]
    offsets: dict[str, dict[str, np.ndarray]]


def reconstruction_loss(output: ad.Tensor, target: np.ndarray, config: TrainConfig, sample_rate: int) -> ad.Tensor:
    """
    The training objective for one decode.

    With relative_losses off this is the multi-scale spectral loss itself.
    Otherwise the spectral loss is divided by its value for an all-zero
    output, and a waveform L1 term (divided by sum |target|, weighted by
    lambda_wave) is added.
    """
    spectral = spectral_loss(output, target, sample_rate)
    if not config.relative_losses:
        return spectral
    silence = float(spectral_loss(ad.Tensor(np.zeros_like(target)), target, sample_rate).value)
    loss = spectral * (1.0 / silence if silence > 0.0 else 1.0)
    if config.lambda_wave > 0.0:
        mass = float(np.sum(np.abs(target))) or 1.0
        loss = loss + ad.absolute(output - ad.Tensor(target)).sum() * (config.lambda_wave / mass)
    return loss


def pair_forward(pair: TrainingPair, codec: Codec, config: TrainConfig, offsets: dict | None = None) -> PairForward:
    """The three decodes of one pair and their reconstruction losses (autodiff graph retained)."""
    env = codec.config.environment
    raw_a = codec.embed(pair.input_a.samples)
    raw_b = codec.embed(pair.input_b.samples)
    z_a, off_a = codec.quantize_tensors(raw_a, offsets["a"] if offsets else None)
    z_b, off_b = codec.quantize_tensors(raw_b, offsets["b"] if offsets else None)

    out_i = codec.synthesize(z_a)
    out_ii = codec.synthesize(mask_partition(z_a, env))
    swapped_a, swapped_b = swap_partition(z_a, z_b, env)
    out_iii = codec.synthesize(swapped_a if pair.receiver == "a" else swapped_b)

    targets = (pair.input_a.samples, pair.target_a.samples, pair.transplanted.samples)
    outputs = (out_i, out_ii, out_iii)
    rate = codec.config.sample_rate
    losses = tuple(reconstruction_loss(out, target, config, rate) for out, target in zip(outputs, targets))
    return PairForward((raw_a, raw_b), outputs, targets, losses, {"a": off_a, "b": off_b})


def _initialize_codebooks(pairs: list[TrainingPair], codec: Codec):
    embeddings = []
    for pair in pairs:
        for w in (pair.input_a, pair.input_b):
            z = codec.embed(w.samples)
            embeddings.append({name: t.value for name, t in z.partitions.items()})
    codec.update_codebooks([PartitionedEmbeddings(codec.config, e) for e in embeddings])
    logger.info("Initialized codebooks from the first minibatch")


def train_step(pairs: list[TrainingPair], codec: Codec, schedule: TrainSchedule, step: int,
               config: TrainConfig = TrainConfig(), discriminator: Discriminator | None = None) -> LossBreakdown:
    adversarial = schedule.phase is Phase.ADVERSARIAL
    if adversarial and discriminator is None:
        raise ConfigError("the adversarial phase needs a discriminator")
    frame = codec.config.frame_samples
    for pair in pairs:
        if len(pair.input_a) % frame or len(pair.input_b) != len(pair.input_a):
            raise ContractViolation(f"pair lengths {len(pair.input_a)}/{len(pair.input_b)} do not fit "
                                       f"{frame}-sample frames")

    try:
        if not schedule.freeze_quantizers and not all(q.initialized for q in codec.quantizers.values()):
            _initialize_codebooks(pairs, codec)

        codec.params.zero_grad()
        forwards = [pair_forward(pair, codec, config) for pair in pairs]
        rec = [sum(float(f.losses[k].value) for f in forwards) for k in range(3)]
        total = ad.Tensor(0.0)
        for f in forwards:
            for loss in f.losses:
                total = total + loss

        adv_value = feature_value = disc_value = 0.0
        if adversarial:
            for f in forwards:
                _, g_loss, feature_loss = adversarial_losses(f.targets[0], f.outputs[0], discriminator)
                total = total + config.lambda_adv * g_loss + config.lambda_feat * feature_loss
                adv_value += float(g_loss.value)
                feature_value += float(feature_loss.value)

        total.backward()
        codec.params.check_gradients()
        if config.grad_clip is not None:
            codec.params.clip_grad_norm(config.grad_clip)
        ad.adam_step(codec.params, **asdict(config.adam))

        if adversarial:
            discriminator.params.zero_grad()
            d_total = None
            for f in forwards:
                d_loss, _, _ = adversarial_losses(f.targets[0], f.outputs[0].detach(), discriminator)
                d_total = d_loss if d_total is None else d_total + d_loss
            d_total.backward()
            discriminator.params.check_gradients()
            ad.adam_step(discriminator.params, **asdict(config.adam))
            disc_value = float(d_total.value)

        if not schedule.freeze_quantizers:
            codec.update_codebooks([e for f in forwards for e in f.embeddings])
    except TrainingAbort as e:
        raise TrainingAbort(f"training step {step}: {e}") from e

    batches = [TrainStepBatch(tuple(o.value for o in f.outputs), f.targets) for f in forwards]
    return LossBreakdown(step=step, phase=schedule.phase.value, rec_i=rec[0], rec_ii=rec[1], rec_iii=rec[2],
                         total=float(total.value), adversarial=adv_value, feature=feature_value,
                         discriminator=disc_value, batches=batches)


# === PHASES ===

class MetricsLog:
    """Append-only JSON-lines log of per-step loss records."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, record: dict):
        with self.path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def frozen_digest(codec: Codec) -> str:
    """sha256 over encoder parameters and codebooks (the parts frozen in the adversarial phase)."""
    digest = hashlib.sha256()
    for name in sorted(codec.params.names()):
        if name.startswith("encoder."):
            digest.update(name.encode())
            digest.update(codec.params[name].value.tobytes())
    for name in sorted(codec.quantizers):
        for key, array in sorted(codec.quantizers[name].state_arrays(name).items()):
            if key.endswith("/entries"):
                digest.update(key.encode())
                digest.update(array.tobytes())
    return digest.hexdigest()


def batch_for_step(config: TrainConfig, corpus, task, global_step: int, frame_samples: int) -> list[TrainingPair]:
    pairs = [make_pair(task, corpus, config.seed, global_step * config.batch_pairs + i, config.noise)
             for i in range(config.batch_pairs)]
    length = min(config.crop_frames * frame_samples, len(pairs[0].input_a) // frame_samples * frame_samples)
    if length == 0:
        raise ConfigError(f"corpus items are shorter than one {frame_samples}-sample frame")
    cropped = []
    for i, pair in enumerate(pairs):
        # whole-frame offset, a pure function of (seed, step, slot)
        slack = max(0, (len(pair.input_a) - length) // frame_samples)
        rng = np.random.default_rng([config.seed, global_step, i])
        cropped.append(crop_pair(pair, length, int(rng.integers(0, slack + 1)) * frame_samples))
    return cropped


def run_phase(schedule: TrainSchedule, corpus: list[Waveform], codec: Codec, config: TrainConfig,
              state: TrainingState = TrainingState(), discriminator: Discriminator | None = None,
              metrics: MetricsLog | None = None) -> TrainingState:
    """Run (the rest of) one phase; returns the advanced training state."""
    if schedule.phase is Phase.ADVERSARIAL:
        if not state.phase1_complete:
            raise ConfigError("the adversarial phase needs a completed reconstruction-phase checkpoint")
        if discriminator is None:
            raise ConfigError("the adversarial phase needs a discriminator")
        codec.params.freeze(schedule.frozen_prefixes)
        codec.freeze_quantizers()
    else:
        codec.params.unfreeze_all()

    start = state.phase_step if state.phase == schedule.phase.value else 0
    logger.info(f"Phase {schedule.phase.value}: steps {start}..{schedule.steps} "
                f"(global step {state.global_step})")
    for phase_step in range(start, schedule.steps):
        pairs = batch_for_step(config, corpus, codec.config.task, state.global_step, codec.config.frame_samples)
        breakdown = train_step(pairs, codec, schedule, state.global_step, config, discriminator)
        state = state.advanced(schedule.phase)
        if metrics is not None:
            metrics.append(breakdown.to_record())
        if phase_step % config.log_every == 0 or phase_step == schedule.steps - 1:
            logger.info(f"step {breakdown.step} [{breakdown.phase}] total={breakdown.total:.3f} "
                        f"i={breakdown.rec_i:.3f} ii={breakdown.rec_ii:.3f} iii={breakdown.rec_iii:.3f}")

    if schedule.phase is Phase.RECONSTRUCTION:
        return replace(state, phase1_complete=True)
    return replace(state, phase2_complete=True)


# === CHECKPOINTS & FULL RUNS ===

def save_training_checkpoint(path: str | Path, codec: Codec, state: TrainingState, config: TrainConfig,
                             discriminator: Discriminator | None = None):
    stores = {"disc": discriminator.params} if discriminator is not None else {}
    codec.save(path, meta={"training": asdict(state), "train_config": config.to_dict()}, stores=stores)


def load_training_checkpoint(path: str | Path) -> tuple[Codec, TrainingState, TrainConfig | None,
                                                        Discriminator | None]:
    data = read_checkpoint(path)
    codec = Codec.from_checkpoint(data)
    state = TrainingState(**data.meta.get("training", {}))
    config = TrainConfig.from_dict(data.meta["train_config"]) if "train_config" in data.meta else None
    discriminator = None
    if "disc" in data.meta.get("stores", {}):
        discriminator = Discriminator(seed=codec.seed)
        restore_store(discriminator.params, "disc", data.arrays, data.meta["stores"]["disc"])
    return codec, state, config, discriminator


def run_single_phase(config: TrainConfig, phase: Phase, out_dir: str | Path,
                     resume: str | Path | None = None) -> tuple[Path, TrainingState]:
    """Run one phase from scratch or from `resume`; writes <out_dir>/<phase>.pckp and appends metrics."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out_dir}: {e}") from e

    if resume is not None:
        codec, state, _, discriminator = load_training_checkpoint(resume)
    else:
        codec, state, discriminator = Codec(config.codec_config(), seed=config.seed), TrainingState(), None

    steps = config.phase1_steps if phase is Phase.RECONSTRUCTION else config.phase2_steps
    if phase is Phase.ADVERSARIAL and discriminator is None:
        discriminator = Discriminator(seed=config.seed)
    corpus = build_corpus(config.corpus)
    state = run_phase(TrainSchedule.for_phase(phase, steps), corpus, codec, config, state, discriminator,
                      MetricsLog(out_dir / "metrics.jsonl"))
    path = out_dir / f"{phase.value}.pckp"
    save_training_checkpoint(path, codec, state, config, discriminator)
    return path, state


def _reconstruction_pending(state: TrainingState, config: TrainConfig) -> bool:
    if not state.phase1_complete:
        return True
    # a finished first phase is extended when the config now asks for more steps
    return state.phase == Phase.RECONSTRUCTION.value and state.phase_step < config.phase1_steps


def run_training(config: TrainConfig, out_dir: str | Path, resume: str | Path | None = None) -> Path:
    """Reconstruction phase, then the adversarial phase when enabled; returns the final checkpoint."""
    state = None
    if resume is not None:
        _, state, _, _ = load_training_checkpoint(resume)
    path = Path(resume) if resume is not None else None
    if state is None or _reconstruction_pending(state, config):
        path, state = run_single_phase(config, Phase.RECONSTRUCTION, out_dir, resume)
    if config.adversarial and not state.phase2_complete:
        path, state = run_single_phase(config, Phase.ADVERSARIAL, out_dir, path)
    logger.info(f"Training finished at global step {state.global_step}: {path}")
    return path
