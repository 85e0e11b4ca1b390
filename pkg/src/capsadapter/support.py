"""Caption-based support set construction and the few-shot cache."""
from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .clients import (
    CLIP_MAX_TOKENS,
    DEFAULT_INSTRUCTION,
    CaptionRequest,
    EncodeRequest,
    GenerateRequest,
    ModelClients,
)
from .errors import ClientError, EmptyClass, EmptyClassname, InvalidCount, NoPrompts
from .features import (
    FeatureMatrix,
    OneHotLabels,
    build_onehot,
    normalize_rows,
    save_cache,
    save_meta,
    write_json,
)

log = logging.getLogger(__name__)

_MASK64 = 0xFFFFFFFFFFFFFFFF
ENCODE_BATCH = 64


@dataclass(frozen=True)
class GenerationJob:
    class_index: int
    prompt: str
    seed: int
    replica: int
    source: int  # index of the sampled training image the prompt came from


@dataclass
class SupportSet:
    manifest: dict
    f_img: FeatureMatrix
    f_cap: FeatureMatrix
    labels: OneHotLabels


def _sample_indices(n: int, k: int, rng: np.random.Generator) -> list[int]:
    if n == 0:
        raise EmptyClass("class has no samples to draw from")
    if n == k:
        return list(range(n))
    if n > k:
        return sorted(int(i) for i in rng.choice(n, size=k, replace=False))
    return [int(i) for i in rng.choice(n, size=k, replace=True)]


def sample_training_images(per_class_refs: Sequence[Sequence[str]], k: int, seed: int) -> list[list[str]]:
    """Draw ``k`` references per class; original order is kept when sampling
    without replacement, replacement is used for classes smaller than ``k``."""
    if k < 1:
        raise InvalidCount("k must be at least 1")
    rng = np.random.default_rng(seed & _MASK64)
    out = []
    for c, refs in enumerate(per_class_refs):
        if not refs:
            raise EmptyClass(f"class {c} has no training images")
        out.append([refs[i] for i in _sample_indices(len(refs), k, rng)])
    return out


def build_class_prompt(classname: str, dataset: str = "") -> str:
    name = classname.replace("_", " ").strip()
    if not name:
        raise EmptyClassname("class name is empty")
    if dataset.lower() == "country211":
        return f"In {name}."
    return f"A photo of {name}."


def build_caption_prompt(class_prompt: str, caption: str) -> str:
    caption = caption.strip()
    return f"{class_prompt} {caption}" if caption else class_prompt


def plan_generation(class_prompts: Sequence[str], m: int, base_seed: int,
                    class_index: int = 0) -> list[GenerationJob]:
    """Pick ``m`` generation prompts from the class's ``K`` caption prompts.

    Prompts are drawn as consecutive shuffled passes over the ``K`` prompts,
    so nothing repeats while ``m <= K``. The r-th use of a prompt text gets
    replica index ``r - 1`` and seed ``base_seed + r - 1``.
    """
    if not class_prompts:
        raise NoPrompts("no caption prompts to plan from")
    if m < 1:
        raise InvalidCount("m must be at least 1")
    rng = np.random.default_rng([base_seed & _MASK64, class_index])
    k = len(class_prompts)
    order: list[int] = []
    while len(order) < m:
        order.extend(int(i) for i in rng.permutation(k))
    uses: Counter[str] = Counter()
    jobs = []
    for src in order[:m]:
        prompt = class_prompts[src]
        replica = uses[prompt]
        uses[prompt] += 1
        jobs.append(GenerationJob(class_index, prompt, (base_seed + replica) & _MASK64, replica, src))
    return jobs


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _encode_all(clients: ModelClients, kind: str, items: list[str], max_tokens: int, workers: int) -> np.ndarray:
    batches = [items[i:i + ENCODE_BATCH] for i in range(0, len(items), ENCODE_BATCH)]

    def run(batch):
        try:
            return clients.encode(EncodeRequest(kind, list(batch), max_tokens)).rows
        except ClientError as exc:
            raise ClientError(f"encoding {kind} batch starting at {batch[0]!r} failed: {exc}") from exc

    rows = [r for chunk in _map(run, batches, workers) for r in chunk]
    return np.asarray(rows, dtype=np.float64)


def build_support_set(
    classnames: Sequence[str],
    per_class_refs: Sequence[Sequence[str]],
    clients: ModelClients,
    k: int,
    m: int,
    base_seed: int = 0,
    dataset: str = "",
    max_tokens: int = CLIP_MAX_TOKENS,
    instruction: str = DEFAULT_INSTRUCTION,
    workers: int = 4,
    out_dir=None,
    backbone: str = "",
) -> SupportSet:
    """Caption, prompt, generate and encode a support set of ``m`` samples per class.

    Row ``j`` of the image cache, the caption cache and the labels all
    describe manifest record ``j``. When ``out_dir`` is given the manifest,
    both caches (with sidecars) and ``labels.json`` are written there.
    """
    if not classnames:
        raise EmptyClass("no classes given")
    if len(per_class_refs) != len(classnames):
        raise ValueError("need one image list per class")
    if m < 1:
        raise InvalidCount("m must be at least 1")
    sampled = sample_training_images(per_class_refs, k, base_seed)
    class_prompts = [build_class_prompt(name, dataset) for name in classnames]

    flat_refs = [ref for refs in sampled for ref in refs]

    def do_caption(ref):
        try:
            return clients.caption(CaptionRequest(ref, instruction)).caption
        except ClientError as exc:
            raise ClientError(f"captioning image {ref!r} failed: {exc}") from exc

    captions = _map(do_caption, flat_refs, workers)

    jobs: list[GenerationJob] = []
    for c in range(len(classnames)):
        class_caps = captions[c * k:(c + 1) * k]
        prompts = [build_caption_prompt(class_prompts[c], cap) for cap in class_caps]
        jobs.extend(plan_generation(prompts, m, base_seed, class_index=c))

    def do_generate(job: GenerationJob):
        try:
            return clients.generate(GenerateRequest(job.prompt, job.seed)).image_ref
        except ClientError as exc:
            raise ClientError(
                f"generation failed for class {job.class_index} replica {job.replica} "
                f"(seed {job.seed}, prompt {job.prompt!r}): {exc}"
            ) from exc

    generated = _map(do_generate, jobs, workers)

    f_img = normalize_rows(_encode_all(clients, "image", generated, max_tokens, workers))
    f_cap = normalize_rows(_encode_all(clients, "text", [j.prompt for j in jobs], max_tokens, workers))
    sample_classes = [j.class_index for j in jobs]
    labels = build_onehot(sample_classes, len(classnames))

    records = []
    for job, gen in zip(jobs, generated):
        src = job.class_index * k + job.source
        records.append({
            "class_index": job.class_index,
            "source_image": flat_refs[src],
            "caption": captions[src],
            "prompt": job.prompt,
            "seed": job.seed,
            "replica": job.replica,
            "image_ref": gen,
        })
    manifest = {
        "dataset": dataset,
        "classes": list(classnames),
        "class_prompts": class_prompts,
        "params": {"k": k, "m": m, "base_seed": base_seed, "max_tokens": max_tokens},
        "records": records,
    }
    result = SupportSet(manifest, f_img, f_cap, labels)
    if out_dir is not None:
        write_support_set(result, out_dir, backbone=backbone)
    return result


def write_support_set(s: SupportSet, out_dir, backbone: str = "") -> None:
    out = Path(out_dir)
    classes = s.manifest["classes"]
    dataset = s.manifest["dataset"]
    sample_classes = [int(c) for c in s.labels.classes]
    write_json(out / "manifest.json", s.manifest)
    for name, mat in (("img.caps", s.f_img), ("cap.caps", s.f_cap)):
        save_cache(mat, out / name)
        save_meta(out / name, dataset=dataset, backbone=backbone, classes=classes, sample_classes=sample_classes)
    write_json(out / "labels.json", {"classes": classes, "sample_classes": sample_classes})


def check_manifest(manifest: dict) -> list[str]:
    """Return a list of violated manifest invariants (empty when valid)."""
    problems = []
    m = manifest["params"]["m"]
    n = len(manifest["classes"])
    records = manifest["records"]
    if len(records) != n * m:
        problems.append(f"expected {n * m} records, found {len(records)}")
    classes = [r["class_index"] for r in records]
    if classes != sorted(classes):
        problems.append("records are not grouped by class")
    for c in range(n):
        recs = [r for r in records if r["class_index"] == c]
        if len(recs) != m:
            problems.append(f"class {c} has {len(recs)} records")
        pairs = [(r["prompt"], r["seed"]) for r in recs]
        if len(set(pairs)) != len(pairs):
            problems.append(f"class {c} repeats a (prompt, seed) pair")
        prefix = manifest["class_prompts"][c]
        if any(not r["prompt"].startswith(prefix) for r in recs):
            problems.append(f"class {c} has a prompt without its class prefix")
    return problems


def build_fewshot_cache(train_features, train_classes: Sequence[int], k: int, seed: int,
                        n_classes: int | None = None) -> tuple[FeatureMatrix, OneHotLabels]:
    """Sample ``k`` real training features per class into a contiguous cache."""
    if k < 1:
        raise InvalidCount("k must be at least 1")
    feats = train_features if isinstance(train_features, FeatureMatrix) else FeatureMatrix(train_features)
    classes = np.asarray(train_classes, dtype=np.int64).reshape(-1)
    if classes.size != feats.rows:
        raise ValueError("one class index per training feature is required")
    if n_classes is None:
        n_classes = int(classes.max()) + 1 if classes.size else 0
    rng = np.random.default_rng(seed & _MASK64)
    rows, sample_classes = [], []
    for c in range(n_classes):
        idx = np.flatnonzero(classes == c)
        if idx.size == 0:
            raise EmptyClass(f"class {c} has no training features")
        picks = idx[_sample_indices(idx.size, k, rng)]
        rows.append(feats.data[picks])
        sample_classes.extend([c] * k)
    data = np.concatenate(rows) if rows else np.zeros((0, feats.dim), dtype=np.float32)
    return FeatureMatrix(data, normalized=feats.normalized), build_onehot(sample_classes, n_classes)


def fewshot_caption_cache(w, labels: OneHotLabels) -> FeatureMatrix:
    """Caption-side cache for the few-shot regime: each sample's class text embedding."""
    wm = w if isinstance(w, FeatureMatrix) else FeatureMatrix(w, normalized=True)
    return FeatureMatrix(wm.data[labels.classes], normalized=wm.normalized)

