"""Train/evaluate drivers shared by the CLI, the estimator and the acceptance suite."""

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import SyntheticConfig, gen_synthetic_dataset, stack_images
from .evaluation import DEFAULT_ALPHAS, binarize, coseg_report, pck_report
from .objective import PRESETS, TERMS, HyperParams, train

SYNTHETIC = PRESETS["synthetic"]

TRAIN_SEED = 1
TEST_SEED = 2


def synthetic_hyperparams(**overrides):
    return HyperParams(**{**SYNTHETIC, **overrides})


def synthetic_splits(n_train=200, n_test=50, cfg=None, train_seed=TRAIN_SEED, test_seed=TEST_SEED):
    cfg = cfg or SyntheticConfig()
    return gen_synthetic_dataset(n_train, cfg, train_seed), gen_synthetic_dataset(n_test, cfg, test_seed)


@torch.no_grad()
def predict(model, samples, batch_size=64):
    """Transforms ``A -> B`` and soft masks for every pair."""
    model.eval()
    transforms, masks_a, masks_b = [], [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        out = model(stack_images(chunk, "a"), stack_images(chunk, "b"))
        T = out["T_ab"].detach()
        transforms += [T.index([j]) for j in range(len(chunk))]
        masks_a += list(out["m_a"].numpy())
        masks_b += list(out["m_b"].numpy())
    return transforms, masks_a, masks_b


@dataclass
class Scores:
    pck: dict
    mean_error_px: float
    precision: float
    jaccard: float

    def row(self):
        out = {f"pck@{a:g}": v for a, v in self.pck.items()}
        out.update(mean_error_px=self.mean_error_px, precision=self.precision, jaccard=self.jaccard)
        return out


def evaluate_model(model, samples, alphas=DEFAULT_ALPHAS, method="otsu"):
    transforms, masks_a, masks_b = predict(model, samples)
    scores = dict(pck={}, mean_error_px=float("nan"), precision=float("nan"), jaccard=float("nan"))
    if any(s.keypoints_a is not None and len(s.keypoints_a) for s in samples):
        rep = pck_report(transforms, samples, alphas)
        scores.update(pck=rep.values, mean_error_px=rep.mean_error_px)
    preds, gts = [], []
    for s, ma, mb in zip(samples, masks_a, masks_b):
        if s.gt_mask_a is not None:
            preds.append(binarize(ma, method))
            gts.append(s.gt_mask_a)
        if s.gt_mask_b is not None:
            preds.append(binarize(mb, method))
            gts.append(s.gt_mask_b)
    if preds:
        rep = coseg_report(preds, gts)
        scores.update(precision=rep.precision, jaccard=rep.jaccard)
    return Scores(**scores)


@dataclass
class RunResult:
    name: str
    hp: HyperParams
    scores: Scores
    seconds: float
    history: list = field(default_factory=list)
    state: object = None


def run(hp, train_set, test_set, name="full", keep_state=False):
    t0 = time.perf_counter()
    state = train(train_set, hp)
    seconds = time.perf_counter() - t0
    scores = evaluate_model(state.model, test_set)
    return RunResult(name, hp, scores, seconds, state.history, state if keep_state else None)


def ablation_configs(hp, terms=TERMS):
    """The full configuration followed by one leave-one-out run per term."""
    configs = [("full", hp)]
    for term in terms:
        configs.append((f"no_{term}", hp.replace(**{f"use_{term}": False})))
    return configs


def ablate(hp, train_set, test_set, terms=TERMS, callback=None):
    results = []
    for name, cfg in ablation_configs(hp, terms):
        res = run(cfg, train_set, test_set, name)
        results.append(res)
        if callback is not None:
            callback(res)
    return results


def ablation_directions(results, match_side=("matching", "cycle", "trans"), coseg_side=TERMS):
    """Check the qualitative ablation trends against the full run.

    Returns a dict of named booleans plus the per-run deltas they rest on.
    """
    by = {r.name: r.scores for r in results}
    full = by["full"]
    dj = {t: full.jaccard - by[f"no_{t}"].jaccard for t in coseg_side if f"no_{t}" in by}
    dp = {t: full.pck[0.1] - by[f"no_{t}"].pck[0.1] for t in match_side if f"no_{t}" in by}
    others_j = [v for t, v in dj.items() if t != "contrast"]
    others_p = [v for t, v in dp.items() if t != "matching"]
    return dict(
        task_reduces_jaccard=dj.get("task", 0.0) > 0,
        contrast_largest_jaccard_drop=dj.get("contrast", 0.0) > max(others_j, default=-np.inf),
        matching_largest_pck_drop=dp.get("matching", 0.0) > 0 and dp["matching"] > max(others_p, default=-np.inf),
        jaccard_drop=dj,
        pck_drop=dp,
    )
