"""Total training objective, optimizer loop and hyper-parameters."""

import configparser
import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .correlation import correlate
from .data import AugmentConfig, augment, stack_images
from .geometry import CoordGrid, NonFiniteTransformError, coord_grid
from .losses import (
    contrastive_terms,
    correspondence_mask,
    cycle_loss,
    match_score,
    matching_loss,
    task_consistency_loss,
    trans_loss,
)
from .networks import Decoder, Encoder, SemanticExtractor, TransformPredictor, decode_masks

log = logging.getLogger(__name__)

TERMS = ("matching", "cycle", "trans", "contrast", "task")
CSV_COLUMNS = ("step", "total") + TERMS


class NumericError(FloatingPointError):
    """A loss term became NaN or infinite."""


@dataclass
class HyperParams:
    lambda_matching: float = 1.0
    lambda_cycle: float = 5.0
    lambda_trans: float = 5.0
    lambda_contrast: float = 10.0
    lambda_task: float = 10.0
    phi: float = 1.0
    margin: float = 2.0
    semantic_dim: int = 128
    learning_rate: float = 1e-4
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    grid_k: int = 10
    seed: int = 0
    use_matching: bool = True
    use_cycle: bool = True
    use_trans: bool = True
    use_contrast: bool = True
    use_task: bool = True
    soft_correspondence: bool = False
    normalize_soft: bool = False
    mask_flow: bool = False
    feature_flow: bool = True
    task_target_flow: bool = True
    random_grid: bool = False
    encoder_lr_scale: float = 1.0
    augment: bool = False
    image_size: int = 48
    encoder_channels: str = "16,32,64"
    feature_dim: int = 64
    extractor_seed: int = 0
    decoder_upsample: str = "nearest"
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lambda_matching", "lambda_cycle", "lambda_trans", "lambda_contrast", "lambda_task"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be nonnegative")
        if self.grid_k < 2:
            raise ValueError("grid_k must be at least 2")
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")

    def weight(self, term):
        if not getattr(self, f"use_{term}"):
            return 0.0
        return getattr(self, f"lambda_{term}")

    @property
    def channels(self):
        return tuple(int(c) for c in str(self.encoder_channels).split(","))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # -- flat key = value config files ---------------------------------------

    def to_config(self):
        lines = [f"{f.name} = {_format_value(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping, base=None):
        known = {f.name: f for f in fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        for key, raw in mapping.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise KeyError(f"unknown hyper-parameter {key!r}")
            values[key] = _coerce(raw, known[key].default)
        return cls(**values)

    @classmethod
    def from_config(cls, text, base=None):
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str
        parser.read_string("[hyperparams]\n" + text)
        return cls.from_mapping(dict(parser["hyperparams"]), base)

    @classmethod
    def load(cls, path, base=None):
        return cls.from_config(Path(path).read_text(encoding="utf-8"), base)


PRESETS = {
    "tss": dict(lambda_cycle=5.0, lambda_trans=5.0, lambda_contrast=10.0, lambda_task=10.0),
    "internet": dict(lambda_cycle=5.0, lambda_trans=5.0, lambda_contrast=20.0, lambda_task=10.0),
    "pf-pascal": dict(lambda_cycle=20.0, lambda_trans=10.0, lambda_contrast=2.5, lambda_task=2.5),
    "spair": dict(lambda_cycle=20.0, lambda_trans=20.0, lambda_contrast=1.0, lambda_task=1.0),
    "paper-lr": dict(learning_rate=5e-8, semantic_dim=2048),
    # Desk-scale recipe for the synthetic benchmark.  Matching scores and the
    # masks warped inside the task term act as fixed targets; the normalized
    # soft correspondence mask is what lets the matching loss reach G.  The
    # warmup keeps early Adam steps from saturating the mask sigmoid at zero.
    "synthetic": dict(
        learning_rate=1e-3,
        warmup_steps=100,
        steps=700,
        soft_correspondence=True,
        normalize_soft=True,
        feature_flow=False,
        task_target_flow=False,
    ),
}


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw, default):
    if not isinstance(raw, str):
        return type(default)(raw)
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


# ---------------------------------------------------------------------------
# model


class CoMatchModel(nn.Module):
    """Encoder, predictor and decoder plus the fixed extractor."""

    def __init__(self, hp):
        super().__init__()
        torch.manual_seed(hp.seed)
        self.encoder = Encoder(hp.channels, hp.feature_dim)
        s = self.encoder.stride
        hw = (hp.image_size // s, hp.image_size // s)
        self.predictor = TransformPredictor(hw)
        self.decoder = Decoder(hp.feature_dim + hw[0] * hw[1], hp.channels, upsample=hp.decoder_upsample)
        self.extractor = SemanticExtractor(hp.semantic_dim, seed=hp.extractor_seed)

    def trainable(self):
        return [self.encoder, self.predictor, self.decoder]

    def forward(self, img_a, img_b):
        enc_a, enc_b = self.encoder(img_a), self.encoder(img_b)
        return self.pair_outputs(enc_a, enc_b)

    def pair_outputs(self, enc_a, enc_b):
        f_a, f_b = enc_a.features, enc_b.features
        n = f_a.shape[0]
        both = self.predictor(torch.cat([f_a, f_b]), torch.cat([f_b, f_a]))
        s_ab = correlate(f_a, f_b)
        s_ba = correlate(f_b, f_a)
        m_a, m_b = decode_masks(self.decoder, enc_a, enc_b, s_ab, s_ba)
        return dict(
            enc_a=enc_a,
            enc_b=enc_b,
            s_ab=s_ab,
            s_ba=s_ba,
            T_ab=both.index(slice(0, n)),
            T_ba=both.index(slice(n, 2 * n)),
            m_a=m_a,
            m_b=m_b,
        )


def sample_coord_grid(k, dtype=torch.float32):
    """Regular ``k x k`` grid over ``[-1, 1]^2``, endpoints included."""
    if k < 2:
        raise ValueError("k must be at least 2")
    return coord_grid(k, k, inclusive=True, dtype=dtype)


def random_coord_grid(k, rng, dtype=torch.float32):
    pts = torch.from_numpy(rng.uniform(-1.0, 1.0, (k * k, 2))).to(dtype)
    return CoordGrid(pts, k, k)


def sample_triplet(batch_size, rng):
    """Three distinct indices drawn uniformly from ``range(batch_size)``."""
    if batch_size < 3:
        raise ValueError("a triplet needs a batch of at least 3")
    a, b, c = rng.choice(batch_size, size=3, replace=False)
    return int(a), int(b), int(c)


def _feature_grid(feats):
    h, w = feats.shape[-2:]
    return coord_grid(h, w, inclusive=False, dtype=feats.dtype)


def matching_term(out, hp):
    grid_a = _feature_grid(out["enc_a"].features)
    grid_b = _feature_grid(out["enc_b"].features)
    soft = hp.soft_correspondence
    mask_ab = correspondence_mask(out["T_ab"], grid_a, grid_b, hp.phi, soft=soft)
    mask_ba = correspondence_mask(out["T_ba"], grid_b, grid_a, hp.phi, soft=soft)
    if soft and hp.normalize_soft:
        # Unit mass per source position: interior and border targets weigh the same.
        mask_ab = mask_ab / mask_ab.sum(-1, keepdim=True).clamp_min(1e-12)
        mask_ba = mask_ba / mask_ba.sum(-1, keepdim=True).clamp_min(1e-12)
    s_ab, s_ba = out["s_ab"], out["s_ba"]
    if not hp.feature_flow:
        # Scores act as fixed targets for G; the encoder learns through D only.
        s_ab, s_ba = s_ab.detach(), s_ba.detach()
    s_a = match_score(s_ab, mask_ab)
    s_b = match_score(s_ba, mask_ba)
    return matching_loss(s_a, s_b, out["m_a"], out["m_b"], detach_masks=not hp.mask_flow)


def total_loss(model, img_a, img_b, hp, triplet=None, grid=None):
    """Weighted objective over a batch of pairs.

    ``triplet`` is a tuple of three batch indices whose A-images form the
    loop for the transitivity term.  Returns ``(loss, breakdown, outputs)``
    where ``breakdown`` maps each term to its unweighted value (0 when the
    term is switched off).
    """
    out = model(img_a, img_b)
    if grid is None:
        grid = sample_coord_grid(hp.grid_k, dtype=img_a.dtype)
    zero = img_a.new_zeros(())
    terms = dict.fromkeys(TERMS, zero)

    if hp.use_matching:
        terms["matching"] = matching_term(out, hp)
    if hp.use_cycle:
        terms["cycle"] = cycle_loss(out["T_ab"], out["T_ba"], grid, grid)
    if hp.use_trans and triplet is not None:
        f = out["enc_a"].features[list(triplet)]
        loop = model.predictor(f, f.roll(-1, dims=0))
        terms["trans"] = trans_loss(loop.index([0]), loop.index([1]), loop.index([2]), grid)
    if hp.use_contrast:
        terms["contrast"] = contrastive_terms(
            img_a, img_b, out["m_a"], out["m_b"], model.extractor, hp.margin, hp.semantic_dim
        ).total
    if hp.use_task:
        terms["task"] = task_consistency_loss(
            out["m_a"], out["m_b"], out["T_ab"], out["T_ba"], detach_targets=not hp.task_target_flow
        )

    total = zero
    for name in TERMS:
        w = hp.weight(name)
        if w:
            total = total + w * terms[name]
    return total, terms, out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    model: CoMatchModel
    optimizer: torch.optim.Optimizer
    hp: HyperParams
    rng: np.random.Generator
    step: int = 0
    history: list = dataclasses.field(default_factory=list)


def init_state(hp):
    model = CoMatchModel(hp)
    groups = [
        {"params": list(model.encoder.parameters()), "lr": hp.learning_rate * hp.encoder_lr_scale},
        {"params": list(model.predictor.parameters()) + list(model.decoder.parameters()), "lr": hp.learning_rate},
    ]
    opt = torch.optim.Adam(groups, lr=hp.learning_rate, betas=(hp.beta1, hp.beta2), eps=hp.adam_eps)
    return TrainState(model, opt, hp, np.random.default_rng(hp.seed))


def learning_rate_at(hp, step):
    """Base rate with a linear ramp over the first ``warmup_steps`` steps."""
    if hp.warmup_steps and step < hp.warmup_steps:
        return hp.learning_rate * (step + 1) / hp.warmup_steps
    return hp.learning_rate


def _set_learning_rate(state):
    lr = learning_rate_at(state.hp, state.step)
    encoder, heads = state.optimizer.param_groups
    encoder["lr"] = lr * state.hp.encoder_lr_scale
    heads["lr"] = lr


def train_step(state, img_a, img_b):
    """One optimizer step on a batch; returns the float loss breakdown."""
    hp = state.hp
    state.model.train()
    triplet = None
    if hp.use_trans and img_a.shape[0] >= 3:
        triplet = sample_triplet(img_a.shape[0], state.rng)
    grid = random_coord_grid(hp.grid_k, state.rng, img_a.dtype) if hp.random_grid else None
    try:
        loss, terms, _ = total_loss(state.model, img_a, img_b, hp, triplet, grid)
    except NonFiniteTransformError as exc:
        raise NumericError(f"predicted transform is not finite at step {state.step}") from exc
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NumericError(f"loss term {name!r} is {value.item()} at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    _set_learning_rate(state)
    state.optimizer.step()
    row = {"step": state.step, "total": float(loss.detach())}
    row.update({k: float(v.detach()) for k, v in terms.items()})
    state.history.append(row)
    state.step += 1
    return row


def _epoch_batches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i : i + batch_size]


def train(samples, hp, state=None, callback=None):
    """Run ``hp.steps`` optimizer steps over ``samples`` (a list of pairs)."""
    state = state or init_state(hp)
    if len(samples) < hp.batch_size:
        raise ValueError(f"need at least {hp.batch_size} pairs, got {len(samples)}")
    aug_cfg = AugmentConfig()
    batches = _epoch_batches(len(samples), hp.batch_size, state.rng)
    for _ in range(hp.steps):
        idx = next(batches)
        batch = [samples[i] for i in idx]
        if hp.augment:
            batch = [augment(s, state.rng, aug_cfg) for s in batch]
        row = train_step(state, stack_images(batch, "a"), stack_images(batch, "b"))
        if hp.log_every and row["step"] % hp.log_every == 0:
            log.info("step %d  " + "  ".join(f"{k}=%.4f" for k in CSV_COLUMNS[1:]), row["step"], *(row[k] for k in CSV_COLUMNS[1:]))
        if callback is not None:
            callback(state)
    return state


def history_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in history:
        writer.writerow([row["step"]] + [repr(row[k]) for k in CSV_COLUMNS[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state, path):
    """Write weights, optimizer moments, step and sampler state to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": "comatch-checkpoint-1",
            "hyperparams": dataclasses.asdict(state.hp),
            "step": state.step,
            "weights": {
                name: getattr(state.model, name).state_dict()
                for name in ("encoder", "predictor", "decoder", "extractor")
            },
            "optimizer": state.optimizer.state_dict(),
            "rng": json.dumps(state.rng.bit_generator.state),
        },
        path,
    )
    return path


def load_checkpoint(path):
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != "comatch-checkpoint-1":
        raise ValueError(f"{path} is not a checkpoint written by this package")
    hp = HyperParams(**blob["hyperparams"])
    state = init_state(hp)
    for name, sd in blob["weights"].items():
        getattr(state.model, name).load_state_dict(sd)
    if "optimizer" in blob:
        state.optimizer.load_state_dict(blob["optimizer"])
    if "rng" in blob:
        state.rng.bit_generator.state = json.loads(blob["rng"])
    state.step = blob["step"]
    return state
