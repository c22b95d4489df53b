"""Three-stage early-exit cascade.

Stage 1 (silhouette) decides confident inputs on its own. Otherwise its top-N
guesses gate stage 2 (whole leaf); an undecided stage 2 forwards its top-M,
and stage 3 averages patch predictions and checks them against both carried
sets. If no stage can commit, a ranked list of plausible classes is reported
instead, ordered by patch voting, by a vote across stages, or by mean
probability.

Config files use the field names directly (``min_prob_seg``, ``top_seg``,
``P``, ...), one ``key=value`` per line.
"""
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .netdef import StageUnavailable
from .preprocess import LeafImage, PatchShortfall, extract_patches, leaf_from_rgb, load_leaf, stage1_input, stage2_input

PROB_TOL = 1e-5


@dataclass(frozen=True)
class CascadeConfig:
    min_prob_seg: float = 0.98
    min_delta_seg: float = 0.95
    top_seg: int = 10
    min_mean_L1L2pred: float = 0.80
    min_prob_whole: float = 0.89
    min_delta_whole: float = 0.85
    top_whole: int = 6
    P: int = 7
    min_mean_L1L3pred: float = 0.60
    min_mean_L2L3pred: float = 0.60
    min_prob_patch: float = 0.95
    min_delta_patch: float = 0.85
    vote_rate: float = 0.71
    vote_merge_rate: float = 0.56
    min_leaf_fraction: float = 1.0
    patch_seed: int = 0
    stage3_gate: str = "union"
    plausible_len: int = 0  # 0 means max(top_seg, top_whole)

    INT_KEYS = ("top_seg", "top_whole", "P", "patch_seed", "plausible_len")
    THRESHOLD_KEYS = ("min_prob_seg", "min_delta_seg", "min_mean_L1L2pred", "min_prob_whole", "min_delta_whole",
                      "min_mean_L1L3pred", "min_mean_L2L3pred", "min_prob_patch", "min_delta_patch",
                      "vote_rate", "vote_merge_rate")

    def validate(self, class_count: Optional[int] = None) -> "CascadeConfig":
        """Range checks; ``threshold > 1`` is allowed to make a rule unreachable."""
        for k in self.THRESHOLD_KEYS:
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        for k in ("top_seg", "top_whole", "P"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be at least 1")
        if not 0 < self.min_leaf_fraction <= 1:
            raise ValueError("min_leaf_fraction must be in (0, 1]")
        if self.stage3_gate not in ("union", "intersection"):
            raise ValueError("stage3_gate must be 'union' or 'intersection'")
        if class_count is not None and max(self.top_seg, self.top_whole) > class_count:
            raise ValueError(f"top_seg/top_whole exceed the class count {class_count}")
        return self

    @property
    def list_len(self) -> int:
        return self.plausible_len or max(self.top_seg, self.top_whole)

    def dumps(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str, base: Optional["CascadeConfig"] = None) -> "CascadeConfig":
        base = base or cls()
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            if not sep or key not in known:
                raise ValueError(f"config line {lineno}: unknown or malformed entry {raw!r}")
            if key == "stage3_gate":
                values[key] = val
            elif key in cls.INT_KEYS:
                values[key] = int(val)
            else:
                values[key] = float(val)
        return replace(base, **values).validate()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "CascadeConfig":
        return cls.loads(Path(path).read_text())


PRESETS = {
    "mk": CascadeConfig(),
    "flavia": CascadeConfig(min_prob_seg=0.95, min_delta_seg=0.91, top_seg=6, min_mean_L1L2pred=0.70,
                            min_prob_whole=0.78, min_delta_whole=0.60, top_whole=10, min_leaf_fraction=0.98),
}


def preset(name: str) -> CascadeConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- verdict types --------------------------------------------------------


@dataclass(frozen=True)
class StageKnowledge:
    entries: tuple  # ((class_id, prob), ...) descending

    @property
    def classes(self) -> list:
        return [c for c, _ in self.entries]

    @property
    def top_class(self) -> int:
        return self.entries[0][0]

    def prob(self, class_id: int) -> Optional[float]:
        for c, p in self.entries:
            if c == class_id:
                return p
        return None

    def __contains__(self, class_id) -> bool:
        return any(c == class_id for c, _ in self.entries)

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class Decided:
    class_id: int
    stage: int
    rule: str


@dataclass(frozen=True)
class Defer:
    knowledge: StageKnowledge


@dataclass(frozen=True)
class Plausible:
    ranking: tuple  # ((class_id, score), ...) non-increasing score
    method: str  # patch_vote | merged_vote | ranked_fallback

    @property
    def class_id(self) -> int:
        return self.ranking[0][0]


@dataclass
class CascadeOutcome:
    verdict: Union[Decided, Plausible]
    stage_reached: int = 1
    trace: dict = field(default_factory=dict)

    @property
    def decided(self) -> bool:
        return isinstance(self.verdict, Decided)

    @property
    def predicted(self) -> int:
        return self.verdict.class_id

    @property
    def final_stage(self) -> int:
        return self.verdict.stage if self.decided else self.stage_reached

    def to_dict(self) -> dict:
        v = self.verdict
        if isinstance(v, Decided):
            verdict = {"type": "Decided", "class_id": v.class_id, "stage": v.stage, "rule": v.rule}
        else:
            verdict = {"type": "Plausible", "method": v.method,
                       "ranking": [{"class_id": c, "score": s} for c, s in v.ranking]}
        trace = {}
        for k, val in self.trace.items():
            trace[k] = val.tolist() if isinstance(val, np.ndarray) else val
        return {"verdict": verdict, "stage_reached": self.stage_reached, "trace": trace}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


# -- primitives -----------------------------------------------------------


def as_prob_vector(p, class_count: Optional[int] = None) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).ravel()
    if class_count is not None and p.shape[0] != class_count:
        raise ValueError(f"probability vector has {p.shape[0]} entries, expected {class_count}")
    if p.size < 2 or np.any(p < 0) or abs(p.sum() - 1) > PROB_TOL:
        raise ValueError("not a probability vector (negative entries or sum != 1)")
    return p


def top_k(p, k: int) -> StageKnowledge:
    """``k`` most probable classes, descending; ties go to the lower class id."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if not 1 <= k <= p.size:
        raise ValueError(f"k={k} out of range for {p.size} classes")
    order = np.argsort(-p, kind="stable")[:k]
    return StageKnowledge(tuple((int(c), float(p[c])) for c in order))


def _top2(p):
    kn = top_k(p, 2)
    (c, a), (_, b) = kn.entries
    return c, a, b


def stage1_decide(p1, cfg: CascadeConfig) -> Union[Decided, Defer]:
    c, top1, top2 = _top2(p1)
    if top1 >= cfg.min_prob_seg:
        return Decided(c, 1, "min_prob_seg")
    if top1 - top2 >= cfg.min_delta_seg:
        return Decided(c, 1, "min_delta_seg")
    return Defer(top_k(p1, cfg.top_seg))


def stage2_decide(p2, k1: StageKnowledge, cfg: CascadeConfig) -> Union[Decided, Defer]:
    if not len(k1):
        raise ValueError("stage-1 knowledge must not be empty")
    c2, top1, top2 = _top2(p2)
    if c2 in k1:
        if c2 == k1.top_class and (k1.prob(c2) + top1) / 2 >= cfg.min_mean_L1L2pred:
            return Decided(c2, 2, "min_mean_L1L2pred")
        if top1 >= cfg.min_prob_whole:
            return Decided(c2, 2, "min_prob_whole")
        if top1 - top2 >= cfg.min_delta_whole:
            return Decided(c2, 2, "min_delta_whole")
    return Defer(top_k(p2, cfg.top_whole))


def aggregate_patches(patch_probs) -> np.ndarray:
    """Elementwise mean of per-patch probability vectors."""
    if len(patch_probs) == 0:
        raise ValueError("no patch predictions to aggregate")
    stacked = np.stack([np.asarray(p, dtype=np.float64).ravel() for p in patch_probs])
    return stacked.mean(axis=0)


def _rank(keys, length):
    """Class ids sorted by descending key tuples, ties to lower id."""
    order = sorted(range(len(keys)), key=lambda c: tuple(-k for k in keys[c]) + (c,))
    return order[:length]


def ranked_fallback(prob_vectors, length: int) -> Plausible:
    mean = np.mean([np.asarray(p, dtype=np.float64) for p in prob_vectors], axis=0)
    order = _rank([(m,) for m in mean], length)
    return Plausible(tuple((c, float(mean[c])) for c in order), "ranked_fallback")


def stage3_decide(p3, patch_preds, k1: StageKnowledge, k2: StageKnowledge, cfg: CascadeConfig,
                  p1, p2) -> CascadeOutcome:
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    p3 = np.asarray(p3, dtype=np.float64)
    c3, top1, top2 = _top2(p3)
    c1 = int(np.argmax(p1))
    c2 = int(np.argmax(p2))
    trace = {"p3": p3, "patch_preds": list(map(int, patch_preds))}
    if cfg.stage3_gate == "union":
        gate = c3 in k1 or c3 in k2
    else:
        gate = c3 in k1 and c3 in k2
    if gate:
        rule = None
        if c3 == c1 and (p1[c3] + top1) / 2 >= cfg.min_mean_L1L3pred:
            rule = "min_mean_L1L3pred"
        elif c3 == c2 and (p2[c3] + top1) / 2 >= cfg.min_mean_L2L3pred:
            rule = "min_mean_L2L3pred"
        elif top1 >= cfg.min_prob_patch:
            rule = "min_prob_patch"
        elif top1 - top2 >= cfg.min_delta_patch:
            rule = "min_delta_patch"
        if rule is not None:
            return CascadeOutcome(Decided(c3, 3, rule), 3, trace)

    k = p3.size
    length = min(cfg.list_len, k)
    if patch_preds:
        votes = np.bincount(np.asarray(patch_preds, dtype=np.int64), minlength=k)
        modal = int(np.argmax(votes))
        if votes[modal] / len(patch_preds) >= cfg.vote_rate:
            order = _rank([(votes[c], p3[c]) for c in range(k)], length)
            ranking = tuple((c, float(votes[c] / len(patch_preds))) for c in order)
            return CascadeOutcome(Plausible(ranking, "patch_vote"), 3, trace)

    stage_votes = np.bincount([c1, c2, c3], minlength=k)
    modal = int(np.argmax(stage_votes))
    floor = min(cfg.min_prob_whole, cfg.min_prob_seg) / 2
    if stage_votes[modal] / 3 >= cfg.vote_merge_rate and min(p1[modal], p2[modal]) >= floor:
        mean = (p1 + p2 + p3) / 3
        order = _rank([(stage_votes[c], mean[c]) for c in range(k)], length)
        ranking = tuple((c, float(stage_votes[c] / 3)) for c in order)
        return CascadeOutcome(Plausible(ranking, "merged_vote"), 3, trace)

    return CascadeOutcome(ranked_fallback([p1, p2, p3], length), 3, trace)


# -- driver ---------------------------------------------------------------


def _to_leaf(image) -> LeafImage:
    if isinstance(image, LeafImage):
        return image
    if isinstance(image, (str, Path)):
        return load_leaf(image)
    return leaf_from_rgb(image)


def _call(model, x, class_count):
    return as_prob_vector(model(x), class_count)


def run_cascade(image, models: dict, cfg: CascadeConfig, jobs: int = 1) -> CascadeOutcome:
    """Classify one leaf, invoking later stage models only when earlier ones defer.

    ``models`` maps ``"s"``, ``"w"``, ``"p"`` to probability providers exposing
    ``input_dims`` and ``class_count``. A provider raising
    :class:`StageUnavailable` at stage 2 or 3 degrades to a ranked list over
    the stages that did answer.
    """
    s, w, p = models["s"], models["w"], models["p"]
    k = s.class_count
    if any(m.class_count not in (None, k) for m in (w, p)):
        raise ValueError("stage models disagree on the class count")
    cfg.validate(k)
    leaf = _to_leaf(image)
    length = min(cfg.list_len, k)

    p1 = _call(s, stage1_input(leaf, s.input_dims[1]), k)
    trace = {"p1": p1}
    d1 = stage1_decide(p1, cfg)
    if isinstance(d1, Decided):
        return CascadeOutcome(d1, 1, trace)
    trace["k1"] = [list(e) for e in d1.knowledge.entries]

    try:
        p2 = _call(w, stage2_input(leaf, w.input_dims[1]), k)
    except StageUnavailable as exc:
        trace["unavailable"] = f"stage 2: {exc}"
        return CascadeOutcome(ranked_fallback([p1], length), 2, trace)
    trace["p2"] = p2
    d2 = stage2_decide(p2, d1.knowledge, cfg)
    if isinstance(d2, Decided):
        return CascadeOutcome(d2, 2, trace)
    trace["k2"] = [list(e) for e in d2.knowledge.entries]

    try:
        patch_set = extract_patches(leaf, cfg.P, p.input_dims[1], cfg.min_leaf_fraction, cfg.patch_seed)
    except PatchShortfall as exc:
        patch_set = exc.partial
        trace["patch_shortfall"] = exc.found
    if not patch_set.patches:
        return CascadeOutcome(ranked_fallback([p1, p2], length), 3, trace)
    trace["patch_origins"] = [list(o) for o in patch_set.origins]

    try:
        if jobs > 1:
            pool = ThreadPoolExecutor(max_workers=jobs)
            try:
                patch_probs = list(pool.map(lambda x: _call(p, x, k), patch_set.patches))
            finally:
                # on failure, queued patches are dropped instead of each waiting out a timeout
                pool.shutdown(wait=False, cancel_futures=True)
        else:
            patch_probs = [_call(p, x, k) for x in patch_set.patches]
    except StageUnavailable as exc:
        trace["unavailable"] = f"stage 3: {exc}"
        return CascadeOutcome(ranked_fallback([p1, p2], length), 3, trace)

    p3 = aggregate_patches(patch_probs)
    preds = [int(np.argmax(v)) for v in patch_probs]
    out = stage3_decide(p3, preds, d1.knowledge, d2.knowledge, cfg, p1, p2)
    out.trace = {**trace, **out.trace}
    return out


# -- evaluation -----------------------------------------------------------


@dataclass
class EvalReport:
    """Per-stage accounting. Counts are floats so averages over runs fit too."""

    total: float
    processed: list  # samples whose final answer came from stage 1, 2, 3
    correct: list
    plausible: float = 0.0
    plausible_covered: float = 0.0
    standalone_accuracy: Optional[list] = None

    @classmethod
    def from_counts(cls, processed, correct, **kwargs) -> "EvalReport":
        processed = [float(x) for x in processed]
        return cls(sum(processed), processed, [float(x) for x in correct], **kwargs)

    @classmethod
    def average(cls, reports) -> "EvalReport":
        reports = list(reports)
        if not reports:
            raise ValueError("nothing to average")
        n = len(reports)
        processed = [sum(r.processed[i] for r in reports) / n for i in range(3)]
        correct = [sum(r.correct[i] for r in reports) / n for i in range(3)]
        return cls(sum(r.total for r in reports) / n, processed, correct,
                   plausible=sum(r.plausible for r in reports) / n,
                   plausible_covered=sum(r.plausible_covered for r in reports) / n)

    @property
    def overall_correct(self) -> float:
        return sum(self.correct)

    @property
    def overall_accuracy(self) -> float:
        return self.overall_correct / self.total

    def stage_share(self, stage: int) -> float:
        return self.processed[stage - 1] / self.total

    def processed_accuracy(self, stage: int) -> Optional[float]:
        n = self.processed[stage - 1]
        return self.correct[stage - 1] / n if n else None

    @property
    def plausible_coverage(self) -> Optional[float]:
        return self.plausible_covered / self.plausible if self.plausible else None

    def check_identity(self) -> None:
        if abs(sum(self.processed) - self.total) > 1e-9:
            raise AssertionError("per-stage processed counts do not add up to the total")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["overall_accuracy"] = self.overall_accuracy
        d["processed_accuracy"] = [self.processed_accuracy(i) for i in (1, 2, 3)]
        d["plausible_coverage"] = self.plausible_coverage
        return d

    def format_table(self) -> str:
        names = ("stage 1 (silhouette)", "stage 2 (whole leaf)", "stage 3 (patches)")
        lines = [f"{'stage':<22}{'processed':>11}{'correct':>10}{'share':>9}  accuracy on entire data (on processed)"]
        for i, name in enumerate(names, 1):
            pa = self.processed_accuracy(i)
            entire = "" if self.standalone_accuracy is None else f"{100 * self.standalone_accuracy[i - 1]:.2f}% "
            proc = "-" if pa is None else f"{100 * pa:.2f}%"
            lines.append(f"{name:<22}{self.processed[i - 1]:>11g}{self.correct[i - 1]:>10g}"
                         f"{100 * self.stage_share(i):>8.2f}%  {entire}({proc})")
        lines.append(f"{'combined':<22}{self.total:>11g}{self.overall_correct:>10g}{100.0:>8.2f}%  "
                     f"{100 * self.overall_accuracy:.2f}%")
        if self.plausible:
            lines.append(f"undecided: {self.plausible:g}, true class in plausible list: "
                         f"{100 * self.plausible_coverage:.2f}%")
        return "\n".join(lines)


def evaluate(samples, models: dict, cfg: CascadeConfig, standalone: bool = False, jobs: int = 1,
             outcomes: Optional[list] = None) -> EvalReport:
    """Run the cascade over ``(image, true_class)`` pairs and tally per stage.

    A Plausible outcome counts toward the stage it was reached at and is
    correct when its first-ranked class is the true one. ``standalone``
    additionally runs stage models 1 and 2 on every sample (and stage 3 on
    every patch set) to fill the "accuracy on entire data" column; a sample
    without any valid patch counts as a stage-3 miss there. This breaks the
    laziness accounting and is off by default.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty manifest")
    processed = [0, 0, 0]
    correct = [0, 0, 0]
    plausible = covered = 0
    solo = [0, 0, 0]

    def one(sample):
        image, label = sample
        leaf = _to_leaf(image)
        return leaf, int(label), run_cascade(leaf, models, cfg)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, samples))
    else:
        results = [one(s) for s in samples]

    for leaf, label, out in results:
        if outcomes is not None:
            outcomes.append(out)
        st = out.final_stage - 1
        processed[st] += 1
        if out.predicted == label:
            correct[st] += 1
        if not out.decided:
            plausible += 1
            if label in [c for c, _ in out.verdict.ranking]:
                covered += 1
        if standalone:
            solo[0] += int(np.argmax(models["s"](stage1_input(leaf, models["s"].input_dims[1])))) == label
            solo[1] += int(np.argmax(models["w"](stage2_input(leaf, models["w"].input_dims[1])))) == label
            try:
                ps = extract_patches(leaf, cfg.P, models["p"].input_dims[1], cfg.min_leaf_fraction, cfg.patch_seed)
            except PatchShortfall as exc:
                ps = exc.partial
            if ps.patches:
                solo[2] += int(np.argmax(aggregate_patches([models["p"](x) for x in ps.patches]))) == label

    n = len(samples)
    report = EvalReport(float(n), [float(x) for x in processed], [float(x) for x in correct],
                        float(plausible), float(covered),
                        [x / n for x in solo] if standalone else None)
    report.check_identity()
    return report
