"""Config-driven experiment runner: staged training, evaluation over SNR cases,
CSV results and plots.

Stages are checkpointed under ``<out>/checkpoints`` with a key hashed from the
part of the configuration that affects them, so methods, cases and reruns
share work. ``force=True`` retrains every stage the run needs (once each).
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import jsonschema
import numpy as np
import torch
import yaml

from .baseline import ClassicalScheme, HuffmanCodebook, classical_sic_receive
from .channel import (CASE_TABLES, OLD_USERS, UserLink, configure_case, draw_fading,
                      link_for_snr, order_users)
from .codec import CodecDims, load_checkpoint, save_checkpoint
from .corpus import (Batch, KnowledgeSet, Vocabulary, build_vocabulary, desk_corpus_path, detokenize,
                     make_batch, paired_knowledge_sets, read_pairs, split_rows)
from .metrics import MetricReport, evaluate_users, make_embedder
from .sic import SemanticSystem, TwoPhasePlan, semantic_sic_decode, two_phase_decode
from .training import (OptimizerConfig, TrainingPlan, add_new_users, assemble_system,
                       pretrain_single_user, retrain, train_initial_K, transmit_batches)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("full_retrain_si", "full_retrain_no_si", "partial_retrain_si",
           "partial_retrain_no_si", "isolated", "classical")
METHOD_LABELS = {
    "full_retrain_si": "Full retraining with SI",
    "full_retrain_no_si": "Full retraining without SI",
    "partial_retrain_si": "Partial retraining with SI",
    "partial_retrain_no_si": "Partial retraining without SI",
    "isolated": "Isolated training",
    "classical": "Huffman + repetition + 64-QAM",
}

DESK_DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "scenario": "two_plus_one",
    "channel": "awgn",
    "cases": [1, 2, 3, 4, 5, 6, 7],
    "methods": list(METHODS),
    "seeds": [0, 1, 2],
    "corpus": {"path": None, "max_groups": 1000, "test_fraction": 0.2, "vocab_cap": 3000,
               "split_seed": 0},
    "dims": {"d": 64, "c": 36, "N": 21, "layers": 2, "heads": 4, "ff": 256, "dropout": 0.1},
    "optimizer": {"learning_rate": 1e-3, "beta1": 0.9, "beta2": 0.98, "epsilon": 1e-8,
                  "weight_decay": 5e-4},
    "training": {"batch_size": 64, "pretrain_epochs": 20, "joint_epochs": 15, "retrain_epochs": 15,
                 "pretrain_snr_db": 10.0, "tau": None, "mask_padding": True},
    "evaluation": {"embedder": "hash", "n_max": 4, "zeta": 0.0, "brevity": "conventional",
                   "max_sentences": None, "eval_seed_offset": 10_000},
    "classical": {"repetition": 3},
    "paper_scale": False,
    "output_dir": "runs/default",
}

# values used when ``paper_scale`` is set (full corpus, larger stacks, longer schedules)
PAPER_SCALE = {
    "corpus": {"max_groups": None},
    "dims": {"d": 128, "layers": 4, "heads": 8, "ff": 512},
    "training": {"pretrain_epochs": 50, "joint_epochs": 30, "retrain_epochs": 30},
}


class ConfigError(ValueError):
    pass


class ResultsError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------

def schema() -> dict:
    text = resources.files("semsic").joinpath("schema", f"experiment.v{SCHEMA_VERSION}.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(raw: Mapping) -> None:
    try:
        jsonschema.validate(dict(raw), schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None


@dataclass
class ExperimentConfig:
    raw: dict

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        """Validate the user's fields, then fill in desk-scale (or paper-scale) defaults."""
        data = dict(data)
        data.setdefault("schema_version", SCHEMA_VERSION)
        for key in ("scenario", "channel", "cases", "methods", "seeds"):
            data.setdefault(key, copy.deepcopy(DESK_DEFAULTS[key]))
        validate_config(data)
        merged = DESK_DEFAULTS
        if data.get("paper_scale"):
            merged = _merge(merged, PAPER_SCALE)
        merged = _merge(merged, data)
        validate_config(merged)
        cfg = cls(merged)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc.__class__.__name__})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def with_overrides(self, **over) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(_merge(self.raw, over))

    def check(self) -> None:
        r = self.raw
        if r["scenario"] == "custom":
            if "custom" not in r:
                raise ConfigError("custom scenario needs a 'custom' block")
            if r["cases"] != [1]:
                raise ConfigError("custom scenario has exactly one case: use cases: [1]")
            snrs = r["custom"]["snrs_db"]
            if r["custom"]["old_users"] >= len(snrs):
                raise ConfigError("custom scenario needs at least one new user")
        path = r["corpus"]["path"]
        if path is not None and not Path(path).is_file():
            raise ConfigError(f"corpus file not found: {path}")
        try:
            self.dims
        except ValueError as exc:
            raise ConfigError(f"dims: {exc}") from None

    # typed views
    @property
    def scenario(self) -> str:
        return self.raw["scenario"]

    @property
    def channel(self) -> str:
        return self.raw["channel"]

    @property
    def fading(self) -> bool:
        return self.channel == "rayleigh"

    @property
    def cases(self) -> list[int]:
        return list(self.raw["cases"])

    @property
    def methods(self) -> list[str]:
        return list(self.raw["methods"])

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["seeds"])

    @property
    def dims(self) -> CodecDims:
        return CodecDims(**self.raw["dims"], L=self.raw["training"]["batch_size"])

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(**self.raw["optimizer"])

    @property
    def training(self) -> dict:
        return self.raw["training"]

    @property
    def evaluation(self) -> dict:
        return self.raw["evaluation"]

    @property
    def tau(self) -> dict[int, float] | None:
        t = self.training.get("tau")
        return None if t is None else {int(k): float(v) for k, v in t.items()}

    @property
    def n_old(self) -> int:
        if self.scenario == "custom":
            return self.raw["custom"]["old_users"]
        return OLD_USERS[self.scenario]

    @property
    def n_users(self) -> int:
        if self.scenario == "custom":
            return len(self.raw["custom"]["snrs_db"])
        return len(CASE_TABLES[self.scenario][1])

    @property
    def old_users(self) -> list[int]:
        return list(range(1, self.n_old + 1))

    @property
    def new_users(self) -> list[int]:
        return list(range(self.n_old + 1, self.n_users + 1))

    def case_snrs(self, case: int) -> tuple[float, ...]:
        if self.scenario == "custom":
            return tuple(self.raw["custom"]["snrs_db"])
        return CASE_TABLES[self.scenario][case]

    def links(self, case: int) -> list[UserLink]:
        """Nominal links of one case (unit gains; fading is drawn per frame)."""
        if self.scenario == "custom":
            links = [link_for_snr(i + 1, s) for i, s in enumerate(self.case_snrs(case))]
            if order_users(links) != [l.index for l in links]:
                raise ConfigError("custom SNRs must be non-increasing with the user index")
            return links
        return configure_case(self.scenario, case, self.channel)[0]

    def hash(self, *sections: str, extra: Mapping | None = None) -> str:
        """Short digest of the selected config sections (all when none given)."""
        keys = sections or tuple(sorted(self.raw))
        blob = {k: self.raw.get(k) for k in keys if k != "output_dir"}
        if extra:
            blob["_extra"] = dict(extra)
        text = json.dumps(blob, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- data -----------------------------------------------------------------------------

@dataclass
class ExperimentData:
    vocab: Vocabulary
    train: dict[int, KnowledgeSet]
    test: dict[int, KnowledgeSet]
    lines: list[str]


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    c = cfg.raw["corpus"]
    pairs = read_pairs(c["path"] or desk_corpus_path())
    lines = sorted({t for p in pairs for t in p[:2]})
    vocab = build_vocabulary(lines, max_size=c["vocab_cap"])
    sets = paired_knowledge_sets(pairs, cfg.n_users, vocab, c["max_groups"], cfg.dims.N)
    train_rows, test_rows = split_rows(len(sets[0]), c["test_fraction"], c["split_seed"])
    train = {ks.user_index: ks.subset(train_rows) for ks in sets}
    test = {ks.user_index: ks.subset(test_rows) for ks in sets}
    return ExperimentData(vocab, train, test, lines)


# -- staged training with checkpoint reuse ----------------------------------------------

class StageStore:
    def __init__(self, root, force: bool = False):
        self.root = Path(root) / "checkpoints"
        self.force = force
        self.trained: list[str] = []
        self.reused: list[str] = []

    def path(self, stage: str, key: str) -> Path:
        return self.root / f"{stage}-{key}.pt"

    def get(self, stage: str, key: str, vocab_size: int, dims: CodecDims, build) -> tuple[SemanticSystem, dict]:
        """Load the stage's system if a checkpoint exists (and not forced); otherwise build it.

        ``build()`` returns ``(system, TrainResult | None)``.
        """
        path = self.path(stage, key)
        # --force retrains each stage once per run, then reuses it like any checkpoint
        if path.exists() and (not self.force or path.name in self.trained):
            states, meta = load_checkpoint(path)
            system = SemanticSystem(vocab_size, dims, use_si=bool(meta.get("use_si")))
            system.load_states(states)
            system.eval()
            self.reused.append(path.name)
            return system, meta
        system, result = build()
        meta = {"stage": stage, "key": key, "use_si": system.use_si,
                "epoch_loss": result.epoch_means() if result else {},
                "seconds_per_it": result.seconds_per_iteration if result and result.history else float("nan")}
        save_checkpoint(path, system.checkpoint_modules(), meta)
        self.trained.append(path.name)
        system.eval()
        return system, meta


class Pipeline:
    """Staged protocol of one configuration: pretrain -> joint -> retrain."""

    def __init__(self, cfg: ExperimentConfig, data: ExperimentData, out_dir, force: bool = False):
        self.cfg = cfg
        self.data = data
        self.out = Path(out_dir)
        self.store = StageStore(self.out, force)
        self.dims = cfg.dims
        self.V = data.vocab.size
        self._base = cfg.hash("corpus", "dims", "optimizer")

    def _plan(self, stage: str, epochs: int, seed: int, name: str) -> TrainingPlan:
        t = self.cfg.training
        return TrainingPlan(stage, epochs, t["batch_size"], seed, self.cfg.tau, mask_padding=t["mask_padding"],
                            log_path=self.out / "logs" / f"{name}.csv",
                            log_header=f"semsic training log config_hash={self.cfg.hash()} stage={name}")

    def _key(self, **extra) -> str:
        t = self.cfg.training
        blob = {"base": self._base, "batch": t["batch_size"], "mask": t["mask_padding"], **extra}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]

    def pretrained(self, seed: int, user: int) -> tuple[SemanticSystem, dict]:
        t = self.cfg.training
        key = self._key(stage="pretrain", seed=seed, user=user, epochs=t["pretrain_epochs"],
                        snr=t["pretrain_snr_db"], channel=self.cfg.channel)

        def build():
            link = link_for_snr(user, t["pretrain_snr_db"])
            plan = self._plan("pretrain_single", t["pretrain_epochs"], seed * 101 + user, f"pretrain-{key}")
            r = pretrain_single_user(user, self.data.train[user], self.V, self.dims, self.cfg.optimizer,
                                     plan, link, fading=self.cfg.fading)
            return r.system, r
        return self.store.get("pretrain", key, self.V, self.dims, build)

    def pretrained_all(self, seed: int) -> dict[int, SemanticSystem]:
        users = self.cfg.old_users + self.cfg.new_users
        return {u: self.pretrained(seed, u)[0] for u in users}

    def _links_key(self, case: int) -> list[float]:
        return [round(l.power, 12) for l in self.cfg.links(case)]

    def joint(self, seed: int, case: int, use_si: bool, pretrained: bool = True,
              epochs: int | None = None) -> tuple[SemanticSystem, dict]:
        t = self.cfg.training
        epochs = t["joint_epochs"] if epochs is None else epochs
        key = self._key(stage="joint", seed=seed, links=self._links_key(case), si=use_si,
                        pretrained=pretrained, epochs=epochs, pre_epochs=t["pretrain_epochs"],
                        pre_snr=t["pretrain_snr_db"], channel=self.cfg.channel, users=self.cfg.old_users)

        def build():
            pre = self.pretrained_all(seed) if pretrained else None
            system = assemble_system(self.V, self.dims, pre, self.cfg.old_users, use_si, seed)
            links = [l for l in self.cfg.links(case) if l.index in self.cfg.old_users]
            plan = self._plan("joint_K", epochs, seed * 1009 + case, f"joint-{key}")
            r = train_initial_K({u: self.data.train[u] for u in self.cfg.old_users}, system, links,
                                self.cfg.optimizer, plan, fading=self.cfg.fading)
            return system, r
        return self.store.get("joint", key, self.V, self.dims, build)

    def retrained(self, seed: int, case: int, method: str) -> tuple[SemanticSystem, dict]:
        mode = "full" if method.startswith("full") else "partial"
        use_si = method.endswith("_si") and not method.endswith("no_si")
        t = self.cfg.training
        key = self._key(stage="retrain", seed=seed, links=self._links_key(case), method=method,
                        epochs=t["retrain_epochs"], joint_epochs=t["joint_epochs"],
                        pre_epochs=t["pretrain_epochs"], pre_snr=t["pretrain_snr_db"],
                        channel=self.cfg.channel, tau=t.get("tau"), n_old=self.cfg.n_old)

        def build():
            old, _ = self.joint(seed, case, use_si)
            system = add_new_users(old, self.pretrained_all(seed), self.cfg.new_users)
            plan = self._plan(f"retrain_{mode}", t["retrain_epochs"], seed * 10007 + case, f"retrain-{key}")
            r = retrain(mode, system, self.cfg.old_users, self.cfg.new_users, self.data.train,
                        self.cfg.links(case), self.cfg.optimizer, plan, fading=self.cfg.fading)
            return system, r
        return self.store.get("retrain", key, self.V, self.dims, build)

    def isolated(self, seed: int) -> tuple[SemanticSystem, dict]:
        pre = self.pretrained_all(seed)
        users = self.cfg.old_users + self.cfg.new_users
        system = assemble_system(self.V, self.dims, pre, users, False, seed)
        system.eval()
        meta = self.pretrained(seed, users[0])[1]
        return system, meta


# -- evaluation -----------------------------------------------------------------------

def eval_blocks(test: Mapping[int, KnowledgeSet], batch_size: int, n: int,
                max_sentences: int | None) -> list[dict[int, Batch]]:
    size = len(next(iter(test.values())))
    if max_sentences is not None:
        size = min(size, max_sentences)
    out = []
    for start in range(0, size, batch_size):
        rows = range(start, min(size, start + batch_size))
        out.append({u: make_batch([ks.sentences[r] for r in rows], n) for u, ks in test.items()})
    return out


def decode_semantic(system: SemanticSystem, method: str, cfg: ExperimentConfig, case: int,
                    blocks: Sequence[dict[int, Batch]], seed: int) -> dict[int, np.ndarray]:
    """Transmit the test blocks through the case's MAC and decode per the method's receiver."""
    nominal = cfg.links(case)
    order = order_users(nominal)
    gen = torch.Generator().manual_seed(seed + cfg.evaluation["eval_seed_offset"] + 97 * case)
    plan = TwoPhasePlan.from_links(nominal, cfg.old_users, cfg.new_users)
    out: dict[int, list[np.ndarray]] = {u: [] for u in blocks[0]}
    system.eval()
    with torch.no_grad():
        for batches in blocks:
            y, links, scales = transmit_batches(batches, system, nominal, 1.0, gen, cfg.fading)
            if method.startswith("partial"):
                ids = two_phase_decode(y, links, plan, system, scales, order=order)
            else:
                ids = semantic_sic_decode(y, links, system, scales, order=order)
            for u in out:
                out[u].append(ids[u])
    return {u: np.concatenate(v) for u, v in out.items()}


def decode_classical(cfg: ExperimentConfig, data: ExperimentData, case: int,
                     blocks: Sequence[dict[int, Batch]], seed: int) -> dict[int, list[str]]:
    codebook = HuffmanCodebook.from_sentences(data.lines)
    dims = cfg.dims
    scheme = ClassicalScheme(codebook, dims.N * dims.c // 2, cfg.raw["classical"]["repetition"])
    nominal = cfg.links(case)
    gen = torch.Generator().manual_seed(seed + cfg.evaluation["eval_seed_offset"] + 97 * case)
    rng = np.random.default_rng(seed + cfg.evaluation["eval_seed_offset"] + 97 * case)
    out: dict[int, list[str]] = {u: [] for u in blocks[0]}
    for batches in blocks:
        texts = {u: [detokenize(row, data.vocab) for row in b.id_matrix] for u, b in batches.items()}
        frames = {u: scheme.transmit(t, l.power, u) for u, t in texts.items()
                  for l in nominal if l.index == u}
        links = draw_fading(nominal, gen) if cfg.fading else nominal
        m = len(next(iter(frames.values())).symbols)
        y = sum(l.h * frames[l.index].symbols for l in links)
        y = y + (rng.standard_normal(m) + 1j * rng.standard_normal(m)) * math.sqrt(0.5)
        dec = classical_sic_receive(y, links, {u: scheme for u in frames},
                                    {u: f.scale for u, f in frames.items()}, len(next(iter(texts.values()))))
        for u in out:
            out[u].extend(dec[u])
    return out


# -- results ----------------------------------------------------------------------------

@dataclass
class ResultRow:
    scenario: str
    channel: str
    case: int
    method: str
    user: int
    seed: int
    user_snr_db: float
    case_snrs_db: str
    similarity: float
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    min_similarity: int
    min_bleu1: int
    min_bleu2: int
    min_bleu3: int
    min_bleu4: int
    seconds_per_it: float


RESULT_FIELDS = [f.name for f in fields(ResultRow)]
TIMING_FIELDS = ("seconds_per_it",)


def report_rows(report: MetricReport, cfg: ExperimentConfig, case: int, method: str, seed: int,
                seconds: float) -> list[ResultRow]:
    snrs = cfg.case_snrs(case)
    flags = report.min_users()
    rows = []
    for u in sorted(report.users):
        m = report.users[u]
        b = [m.bleu.get(n, float("nan")) for n in (1, 2, 3, 4)]
        rows.append(ResultRow(cfg.scenario, cfg.channel, case, method, u, seed, snrs[u - 1],
                              ";".join(f"{s:g}" for s in snrs), m.similarity, *b,
                              int(u in flags["similarity"]),
                              *[int(u in flags.get(f"bleu{n}", ())) for n in (1, 2, 3, 4)],
                              seconds))
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_results(path, rows: Sequence[ResultRow], config_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# semsic results schema={SCHEMA_VERSION} config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in RESULT_FIELDS])


def read_results(path) -> tuple[list[dict], str | None]:
    path = Path(path)
    if not path.is_file():
        raise ResultsError(f"results file not found: {path}")
    text = path.read_text()
    lines = text.splitlines()
    header_hash = None
    body = []
    for line in lines:
        if line.startswith("#"):
            if "config_hash=" in line:
                header_hash = line.split("config_hash=", 1)[1].split()[0]
            continue
        body.append(line)
    if not body:
        raise ResultsError(f"{path}: empty results file")
    reader = csv.DictReader(io.StringIO("\n".join(body)))
    if reader.fieldnames != RESULT_FIELDS:
        raise ResultsError(f"{path}: columns do not match the result schema")
    rows = list(reader)
    if not rows:
        raise ResultsError(f"{path}: no result rows")
    return rows, header_hash


# -- runner ----------------------------------------------------------------------------

@dataclass
class ExperimentRun:
    rows: list[ResultRow]
    csv_path: Path
    config_hash: str
    trained: list[str] = field(default_factory=list)
    reused: list[str] = field(default_factory=list)


def run_experiment(cfg: ExperimentConfig, out_dir=None, force: bool = False,
                   seeds: Sequence[int] | None = None, data: ExperimentData | None = None) -> ExperimentRun:
    out = Path(out_dir or cfg.raw["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.hash()
    (out / "config.yaml").write_text(f"# config_hash={h}\n" + yaml.safe_dump(cfg.raw, sort_keys=True))
    data = data or prepare_data(cfg)
    pipe = Pipeline(cfg, data, out, force)
    ev = cfg.evaluation
    embedder = make_embedder(ev["embedder"])
    blocks = eval_blocks(data.test, cfg.training["batch_size"], cfg.dims.N, ev["max_sentences"])
    refs = {u: [detokenize(row, data.vocab) for b in blocks for row in b[u].id_matrix] for u in blocks[0]}
    rows: list[ResultRow] = []
    for seed in (seeds if seeds is not None else cfg.seeds):
        for case in cfg.cases:
            for method in cfg.methods:
                log.info("seed %d case %d %s", seed, case, method)
                if method == "classical":
                    decoded = decode_classical(cfg, data, case, blocks, seed)
                    seconds = float("nan")
                else:
                    if method == "isolated":
                        system, meta = pipe.isolated(seed)
                    else:
                        system, meta = pipe.retrained(seed, case, method)
                    ids = decode_semantic(system, method, cfg, case, blocks, seed)
                    decoded = {u: [detokenize(r, data.vocab) for r in v] for u, v in ids.items()}
                    seconds = float(meta.get("seconds_per_it", float("nan")))
                report = evaluate_users(refs, decoded, embedder, ev["n_max"], ev["zeta"], ev["brevity"])
                rows.extend(report_rows(report, cfg, case, method, seed, seconds))
    csv_path = out / "results.csv"
    write_results(csv_path, rows, h)
    return ExperimentRun(rows, csv_path, h, pipe.store.trained, pipe.store.reused)


def loss_comparison(cfg: ExperimentConfig, out_dir, seeds: Sequence[int] | None = None, case: int | None = None,
                    force: bool = False, data: ExperimentData | None = None) -> dict[str, dict[int, list[float]]]:
    """Joint-training loss per epoch with pretrained versus from-scratch initialization."""
    data = data or prepare_data(cfg)
    pipe = Pipeline(cfg, data, out_dir, force)
    case = case if case is not None else cfg.cases[-1]
    curves: dict[str, dict[int, list[float]]] = {"pretrained": {}, "scratch": {}}
    for seed in (seeds if seeds is not None else cfg.seeds):
        for label, pre in (("pretrained", True), ("scratch", False)):
            _, meta = pipe.joint(seed, case, use_si=False, pretrained=pre)
            curves[label][seed] = [v for _, v in sorted((int(k), v) for k, v in meta["epoch_loss"].items())]
    path = Path(out_dir) / "loss_comparison.csv"
    with open(path, "w", newline="") as fh:
        fh.write(f"# semsic loss comparison config_hash={cfg.hash()} case={case}\n")
        w = csv.writer(fh)
        w.writerow(["init", "seed", "epoch", "loss"])
        for label, per_seed in curves.items():
            for seed, values in per_seed.items():
                for e, v in enumerate(values, 1):
                    w.writerow([label, seed, e, f"{v:.10g}"])
    return curves


# -- plots -----------------------------------------------------------------------------

def _min_by_case(rows: Iterable[dict], metric: str) -> dict[str, dict[int, float]]:
    """method -> case -> mean over seeds of the minimum over users."""
    per: dict[tuple[str, int, int], list[float]] = {}
    for r in rows:
        per.setdefault((r["method"], int(r["case"]), int(r["seed"])), []).append(float(r[metric]))
    agg: dict[str, dict[int, list[float]]] = {}
    for (method, case, _), vals in per.items():
        agg.setdefault(method, {}).setdefault(case, []).append(min(vals))
    return {m: {c: float(np.mean(v)) for c, v in cs.items()} for m, cs in agg.items()}


def summarize(rows: Iterable[dict], metric: str = "similarity") -> dict[str, dict[int, float]]:
    return _min_by_case(rows, metric)


def plot_results(csv_paths: Sequence, out_path, metric: str = "similarity", title: str | None = None) -> Path:
    """Min-across-users metric versus case, one line per method; missing cases leave gaps.

    ``metric`` is ``similarity``, ``bleu`` (four panels, n = 1..4) or one
    column name such as ``bleu1``.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not csv_paths:
        raise ResultsError("no result files given")
    rows: list[dict] = []
    for p in csv_paths:
        rows.extend(read_results(p)[0])
    metrics = [f"bleu{n}" for n in (1, 2, 3, 4)] if metric == "bleu" else [metric]
    if metrics[0] not in RESULT_FIELDS:
        raise ResultsError(f"unknown metric {metric!r}")
    cases = list(range(1, 8))
    fig, axes = plt.subplots(1, len(metrics), figsize=(4.2 * len(metrics), 3.6), squeeze=False)
    for ax, m in zip(axes[0], metrics):
        table = _min_by_case(rows, m)
        for method in [x for x in METHODS if x in table]:
            ys = [table[method].get(c, np.nan) for c in cases]
            ax.plot(cases, ys, marker="o", label=METHOD_LABELS[method])
        ax.set_xlabel("case")
        ax.set_ylabel(f"minimal {'semantic similarity' if m == 'similarity' else m.upper()}")
        ax.set_xticks(cases)
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
    axes[0][0].legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_loss(curves: Mapping[str, Mapping[int, Sequence[float]]], out_path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.6))
    for label, per_seed in curves.items():
        if not per_seed:
            continue
        arr = np.array([list(v) for v in per_seed.values()], dtype=float)
        ax.plot(np.arange(1, arr.shape[1] + 1), arr.mean(axis=0), marker="o",
                label="with pretraining" if label == "pretrained" else "without pretraining")
    ax.set_xlabel("epoch")
    ax.set_ylabel("joint loss (bits per sentence)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


# -- figure recipes -------------------------------------------------------------------

FIGURES = {
    "sim3": {"runs": [{"scenario": "two_plus_one", "channel": "awgn"},
                      {"scenario": "two_plus_one", "channel": "rayleigh"}], "metric": "similarity"},
    "bleu3-awgn": {"runs": [{"scenario": "two_plus_one", "channel": "awgn"}], "metric": "bleu"},
    "bleu3-rayleigh": {"runs": [{"scenario": "two_plus_one", "channel": "rayleigh"}], "metric": "bleu"},
    "sim5": {"runs": [{"scenario": "three_plus_two", "channel": "awgn"}], "metric": "similarity"},
    "loss": {"runs": [{"scenario": "two_plus_one", "channel": "awgn"}], "metric": "loss"},
}


def reproduce(figure: str, cfg: ExperimentConfig, out_dir, force: bool = False,
              seeds: Sequence[int] | None = None) -> list[Path]:
    if figure not in FIGURES:
        raise ConfigError(f"unknown figure {figure!r}")
    recipe = FIGURES[figure]
    out = Path(out_dir)
    written = []
    for spec in recipe["runs"]:
        run_cfg = cfg.with_overrides(**spec)
        sub = out / f"{spec['scenario']}-{spec['channel']}"
        if recipe["metric"] == "loss":
            curves = loss_comparison(run_cfg, sub, seeds, force=force)
            written.append(plot_loss(curves, out / f"{figure}.png"))
            continue
        run = run_experiment(run_cfg, sub, force, seeds)
        written.append(plot_results([run.csv_path], out / f"{figure}-{spec['channel']}.png",
                                    recipe["metric"], f"{spec['scenario']} {spec['channel']}"))
    return written
