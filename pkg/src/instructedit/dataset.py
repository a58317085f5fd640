"""Source ingestion, quota balancing, forge orchestration and persistence.

A source is a directory holding ``source.json``
(``{"format_version": 1, "source_id", "verified"}``) and ``pairs.jsonl`` with
one ``{"original", "edited", "instruction", "task_type"}`` object per line,
image paths relative to the source directory.

A built dataset is a directory with ``records.jsonl`` (one EditSample per
line, sorted by id), ``images/`` and ``manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from . import forge
from .exceptions import (
    BuildFailureError,
    ClientError,
    ConfigError,
    DataError,
    DecodeError,
    FormatVersionError,
    InvalidRangeError,
    QuotaExceedsAvailableError,
    UnreadableSourceError,
)
from .images import decode_png
from .seeding import derive_seed
from .synth import negatives_fixture, pair_id, rectify_fixture, synth_world

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
FULL_QUOTAS = {"ip2p": 10177, "magicbrush": 8807, "seed": 21016}
FULL_TOTAL = 40000
PRESET_TOTALS = {"5k": 5000, "10k": 10000, "20k": 20000, "40k": 40000, "desk": 400}
VERIFIED_SOURCES = ("magicbrush",)


@dataclass
class RawPair:
    id: str
    source_id: str
    original: bytes
    edited: bytes
    instruction: str
    task_type: str | None = None


@dataclass
class EditSample:
    id: str
    source_id: str
    original_path: str
    edited_path: str
    raw_instruction: str
    rectified_instruction: str | None
    negatives: list[str] | None
    attributes: list[str] | None
    verified: bool
    task_type: str | None = None
    cost_usd: float = 0.0

    def problems(self, max_diff_tokens: int = 5) -> list[str]:
        out = []
        if self.verified and self.rectified_instruction != self.raw_instruction:
            out.append("verified sample was rectified")
        if not self.rectified_instruction:
            out.append("missing rectified instruction")
        elif forge.count_tokens(self.rectified_instruction) > forge.SUMMARY_BUDGET:
            out.append("rectified instruction over token budget")
        if not self.negatives:
            out.append("missing negatives")
        else:
            try:
                neg = forge.NegativeSet(self.rectified_instruction or "",
                                        self.negatives, self.attributes or [])
                out.extend(neg.check(max_diff_tokens))
            except InvalidRangeError as exc:
                out.append(str(exc))
        return out

    @property
    def training_ready(self) -> bool:
        return not self.problems()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "EditSample":
        return cls(**d)


@dataclass
class DatasetManifest:
    quotas: dict[str, int]
    achieved: dict[str, int]
    total: int
    task_histogram: dict[str, int]
    config_hash: str
    cost_usd: float
    rectified_counts: dict[str, int] = field(default_factory=dict)
    unit_price_usd: float = 0.02
    failures: int = 0

    def check(self) -> list[str]:
        out = []
        for src, n in self.achieved.items():
            if n > self.quotas.get(src, 0):
                out.append(f"{src}: achieved {n} exceeds quota")
        if self.total != sum(self.achieved.values()):
            out.append("total differs from sum of achieved")
        if sum(self.task_histogram.values()) != self.total:
            out.append("task histogram does not sum to total")
        return out

    def to_dict(self):
        return asdict(self)


def round_half_up(x) -> int:
    return int(Decimal(str(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def scale_quotas(total: int, base: dict[str, int] = FULL_QUOTAS) -> dict[str, int]:
    """Per-source quotas proportional to ``base``, rounded half up per source."""
    denom = sum(base.values())
    return {k: round_half_up(Decimal(v) * Decimal(total) / Decimal(denom))
            for k, v in base.items()}


def ingest_source(path) -> tuple[list[RawPair], int]:
    """Read a source directory. Returns the pairs and the count of skipped entries."""
    root = Path(path)
    try:
        meta = json.loads((root / "source.json").read_text(encoding="utf-8"))
        lines = (root / "pairs.jsonl").read_text(encoding="utf-8").splitlines()
    except (OSError, json.JSONDecodeError) as exc:
        raise UnreadableSourceError(f"cannot read source {root}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"{root}: format_version {meta.get('format_version')!r}, "
            f"expected {FORMAT_VERSION}"
        )
    source_id = meta.get("source_id", root.name)
    pairs, skipped = [], 0
    for line in lines:
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            original = (root / entry["original"]).read_bytes()
            edited = (root / entry["edited"]).read_bytes()
            decode_png(original)
            decode_png(edited)
        except (OSError, KeyError, json.JSONDecodeError, DecodeError) as exc:
            log.debug("skipping entry in %s: %s", root, exc)
            skipped += 1
            continue
        pairs.append(RawPair(
            id=pair_id(original, edited, entry["instruction"]),
            source_id=source_id, original=original, edited=edited,
            instruction=entry["instruction"], task_type=entry.get("task_type"),
        ))
    if skipped:
        log.warning("%s: skipped %d corrupt entries", source_id, skipped)
    return pairs, skipped


def source_is_verified(path) -> bool:
    meta = json.loads((Path(path) / "source.json").read_text(encoding="utf-8"))
    return bool(meta.get("verified", False))


def _allocate(quota: int, available: dict[str, int], order: list[str]) -> dict[str, int]:
    """Spread ``quota`` as evenly as possible over labels, capped by availability."""
    alloc = {k: 0 for k in available}
    remaining = quota
    open_labels = [k for k in order if available[k] > 0]
    while remaining > 0 and open_labels:
        share, extra = divmod(remaining, len(open_labels))
        given = 0
        for i, k in enumerate(open_labels):
            want = share + (1 if i < extra else 0)
            take = min(want, available[k] - alloc[k])
            alloc[k] += take
            given += take
        remaining -= given
        open_labels = [k for k in open_labels if alloc[k] < available[k]]
        if given == 0:
            break
    return alloc


def balance_sample(sources: list[list[RawPair]], quotas: list[int],
                   seed: int = 0) -> list[list[str]]:
    """Pick exactly ``quotas[i]`` ids from ``sources[i]``, stratified by task type."""
    if len(sources) != len(quotas):
        raise ConfigError("one quota per source required")
    picked = []
    for i, (pairs, quota) in enumerate(zip(sources, quotas)):
        if quota < 0:
            raise ConfigError(f"negative quota {quota}")
        if quota > len(pairs):
            name = pairs[0].source_id if pairs else f"source {i}"
            raise QuotaExceedsAvailableError(
                f"{name}: quota {quota} exceeds {len(pairs)} available pairs"
            )
        rng = np.random.default_rng(derive_seed(seed, f"balance/{i}"))
        ordered = sorted(pairs, key=lambda p: p.id)
        labels = sorted({p.task_type for p in ordered if p.task_type})
        if not labels or any(p.task_type is None for p in ordered):
            if quota and labels:
                log.info("source %d has unlabeled pairs; sampling uniformly", i)
            idx = rng.choice(len(ordered), size=quota, replace=False)
            picked.append(sorted(ordered[j].id for j in idx))
            continue
        groups = {k: [p for p in ordered if p.task_type == k] for k in labels}
        order = [labels[j] for j in rng.permutation(len(labels))]
        alloc = _allocate(quota, {k: len(v) for k, v in groups.items()}, order)
        ids = []
        for k in labels:
            idx = rng.choice(len(groups[k]), size=alloc[k], replace=False)
            ids.extend(groups[k][j].id for j in idx)
        picked.append(sorted(ids))
    return picked


@dataclass
class BuildConfig:
    preset: str = "desk"
    seed: int = 0
    source_dirs: str = ""  # comma separated; empty means synthetic sources
    source_ids: str = "ip2p,magicbrush,seed"
    quotas: str = ""  # comma separated; empty means the preset's proportional quotas
    verified_sources: str = "magicbrush"
    k_negatives: int = 3
    max_diff_tokens: int = 5
    max_retries: int = 2
    failure_ceiling: float = 0.02
    workers: int = 4
    model_id: str = "mock-vlm"
    unit_price_usd: float = 0.02
    synth_oversample: float = 1.25
    synth_noise_rate: float = 0.5

    def __post_init__(self):
        problems = []
        if self.preset not in PRESET_TOTALS:
            problems.append(f"preset: unknown {self.preset!r}")
        if self.k_negatives < 1:
            problems.append("k_negatives: must be >= 1")
        if not 0 <= self.failure_ceiling <= 1:
            problems.append("failure_ceiling: must lie in [0, 1]")
        if self.workers < 1:
            problems.append("workers: must be >= 1")
        if problems:
            raise ConfigError("invalid build config: " + "; ".join(problems), problems)

    def source_names(self) -> list[str]:
        return [s.strip() for s in self.source_ids.split(",") if s.strip()]

    def quota_map(self) -> dict[str, int]:
        names = self.source_names()
        if self.quotas:
            values = [int(q) for q in self.quotas.split(",")]
            if len(values) != len(names):
                raise ConfigError("quotas and source_ids differ in length")
            return dict(zip(names, values))
        scaled = scale_quotas(PRESET_TOTALS[self.preset])
        missing = [n for n in names if n not in scaled]
        if missing:
            raise ConfigError(f"no preset quota for sources {missing}; set quotas")
        return {n: scaled[n] for n in names}

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def write_source(pairs, out_dir, source_id: str, verified: bool = False,
                 instruction_attr: str = "raw_instruction") -> Path:
    """Materialize synthetic pairs as a source directory."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, p in enumerate(pairs):
        orig, edit = f"images/{i:05d}_original.png", f"images/{i:05d}_edited.png"
        (root / orig).write_bytes(p.original_png)
        (root / edit).write_bytes(p.edited_png)
        lines.append(json.dumps({
            "original": orig, "edited": edit,
            "instruction": getattr(p, instruction_attr), "task_type": p.task_type,
        }, sort_keys=True))
    (root / "pairs.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (root / "source.json").write_text(json.dumps(
        {"format_version": FORMAT_VERSION, "source_id": source_id, "verified": verified},
        sort_keys=True) + "\n", encoding="utf-8")
    return root


def synth_fixture_entries(pairs) -> list[dict]:
    entries = []
    for p in pairs:
        digest = forge.pair_digest([p.original_png, p.edited_png])
        entries.append({"pair": digest, "task": forge.TASK_RECTIFY,
                        "responses": [rectify_fixture(p)]})
        entries.append({"pair": digest, "task": forge.TASK_NEGATIVES,
                        "responses": [negatives_fixture(p)]})
    return entries


def make_synth_sources(config: BuildConfig, root) -> tuple[list[Path], Path]:
    """Write one synthetic source per configured id plus the matching VLM fixtures."""
    root = Path(root)
    verified = set(s.strip() for s in config.verified_sources.split(",") if s.strip())
    dirs, entries = [], []
    for name, quota in config.quota_map().items():
        n = max(1, int(np.ceil(quota * config.synth_oversample)))
        noise = 0.0 if name in verified else config.synth_noise_rate
        pairs = synth_world(n, derive_seed(config.seed, f"synth/{name}"), noise_rate=noise)
        dirs.append(write_source(pairs, root / "sources" / name, name, name in verified))
        entries.extend(synth_fixture_entries(pairs))
    fixtures = root / "fixtures"
    forge.write_fixtures(fixtures, entries)
    return dirs, fixtures


def _forge_one(pair: RawPair, verified: bool, client, config: BuildConfig):
    images = (pair.original, pair.edited)
    cost = 0.0
    if verified:
        rectified = pair.instruction
    else:
        rec = forge.rectify_instruction(
            images, client, max_retries=config.max_retries,
            prices={"default": config.unit_price_usd},
            pair_meta={"raw_instruction": pair.instruction},
        )
        rectified, cost = rec.summarized_instruction, rec.cost_usd
    negs = forge.generate_negatives(images, rectified, client, k=config.k_negatives,
                                    max_diff_tokens=config.max_diff_tokens,
                                    max_retries=config.max_retries)
    return rectified, negs, cost


def build_dataset(config: BuildConfig, out_dir, client, source_dirs=None,
                  cache_path=None) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = config.source_names()
    if source_dirs is None:
        if not config.source_dirs:
            raise ConfigError("no sources configured")
        source_dirs = [Path(s.strip()) for s in config.source_dirs.split(",")]
    if len(source_dirs) != len(names):
        raise ConfigError("source_dirs and source_ids differ in length")
    quotas = config.quota_map()
    verified_set = {s.strip() for s in config.verified_sources.split(",") if s.strip()}

    sources = []
    for name, path in zip(names, source_dirs):
        pairs, _ = ingest_source(path)
        for p in pairs:
            p.source_id = name
        sources.append(pairs)
    picked = balance_sample(sources, [quotas[n] for n in names], config.seed)

    jobs = []
    for name, pairs, ids in zip(names, sources, picked):
        by_id = {p.id: p for p in pairs}
        verified = name in verified_set or source_is_verified(
            source_dirs[names.index(name)])
        jobs.extend((by_id[i], verified) for i in ids)

    cache = forge.ResponseCache(cache_path or out / "cache" / "vlm_responses.jsonl")
    cclient = forge.CachedClient(client, cache)

    def run(job):
        pair, verified = job
        try:
            return job, _forge_one(pair, verified, cclient, config), None
        except (ClientError, DataError) as exc:
            return job, None, exc

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(run, jobs))

    failures = [(job[0].id, exc) for job, res, exc in results if exc is not None]
    if jobs and len(failures) / len(jobs) > config.failure_ceiling:
        raise BuildFailureError(
            f"{len(failures)} of {len(jobs)} samples failed "
            f"(ceiling {config.failure_ceiling:.1%}); first: {failures[0][1]}"
        )
    for pid, exc in failures:
        log.warning("sample %s dropped: %s", pid, exc)

    img_dir = out / "images"
    if img_dir.exists():
        shutil.rmtree(img_dir)
    img_dir.mkdir()
    samples = []
    for (pair, verified), res, exc in results:
        if exc is not None:
            continue
        rectified, negs, cost = res
        orig_rel, edit_rel = f"images/{pair.id}_original.png", f"images/{pair.id}_edited.png"
        (out / orig_rel).write_bytes(pair.original)
        (out / edit_rel).write_bytes(pair.edited)
        samples.append(EditSample(
            id=pair.id, source_id=pair.source_id, original_path=orig_rel,
            edited_path=edit_rel, raw_instruction=pair.instruction,
            rectified_instruction=rectified, negatives=list(negs.negatives),
            attributes=list(negs.attributes), verified=verified,
            task_type=pair.task_type, cost_usd=cost,
        ))
    samples.sort(key=lambda s: s.id)
    with open(out / "records.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")

    achieved = Counter(s.source_id for s in samples)
    rectified_counts = Counter(s.source_id for s in samples if not s.verified)
    cost = sum(Decimal(str(s.cost_usd)) for s in samples)
    manifest = DatasetManifest(
        quotas={n: quotas[n] for n in names},
        achieved={n: achieved.get(n, 0) for n in names},
        total=len(samples),
        task_histogram=dict(sorted(Counter(s.task_type or "unlabeled"
                                           for s in samples).items())),
        config_hash=config.config_hash(),
        cost_usd=float(cost),
        rectified_counts={n: rectified_counts.get(n, 0) for n in names},
        unit_price_usd=config.unit_price_usd,
        failures=len(failures),
    )
    problems = manifest.check()
    if problems:
        raise DataError("manifest invariant violated: " + "; ".join(problems))
    (out / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest


def load_records(data_dir) -> list[EditSample]:
    path = Path(data_dir) / "records.jsonl"
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UnreadableSourceError(f"cannot read {path}: {exc}") from exc
    return [EditSample.from_dict(json.loads(line)) for line in lines if line.strip()]


def load_manifest(data_dir) -> DatasetManifest:
    d = json.loads((Path(data_dir) / "manifest.json").read_text(encoding="utf-8"))
    return DatasetManifest(**d)


@dataclass
class CostSummary:
    total_usd: Decimal
    per_source_usd: dict[str, Decimal]

    def __str__(self):
        rows = [f"{k:<16}{v:>10.2f}" for k, v in self.per_source_usd.items()]
        return "\n".join(rows + [f"{'total':<16}{self.total_usd:>10.2f}"])


def cost_report(manifest: DatasetManifest) -> CostSummary:
    price = Decimal(str(manifest.unit_price_usd))
    cents = Decimal("0.01")
    per = {k: (Decimal(n) * price).quantize(cents, rounding=ROUND_HALF_UP)
           for k, n in manifest.rectified_counts.items()}
    total = (Decimal(sum(manifest.rectified_counts.values())) * price).quantize(
        cents, rounding=ROUND_HALF_UP)
    return CostSummary(total, per)
