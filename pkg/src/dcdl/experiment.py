"""End-to-end experiment driver.

One run = (target class, seed): balance a one-vs-all subset, dither it,
train the network, extract rules layerwise and black-box (against predicted
and against true labels), then score similarity to the network and accuracy
against ground truth on a balanced test set.  Runs across classes and seeds
aggregate into a CSV and a pairwise significance table; a failed run is
recorded and skipped without stopping the others.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import binarize, bnn, datasets, extraction, metrics
from .boolcore import eval_formula_batch, format_formula
from .errors import ConfigError
from .sls import SlsParams

METHODS = ("neural_network", "dcdl", "bb_prediction", "bb_label")

DATASET_NAMES = ("mnist", "fashion", "cifar10", "synthetic")
SYNTHETIC_STYLES = ("planted", "prototypes")


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    target_classes: list = field(default_factory=lambda: [0, 1, 2])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "dcdl-out"
    data_dir: str | None = None

    # rule search
    k: int = 40
    max_iteration: int = 2000
    p_g1: float = 0.5
    p_g2: float = 0.5
    p_s: float = 0.5
    batch_size: int = 64
    restart_after: int = 600
    max_windows: int = 200_000

    # network
    nn_filters1: int = 8
    nn_filters2: int = 8
    nn_filter_size: int = 3
    nn_pool: int = 2
    nn_dropout: float = 0.5
    nn_learning_rate: float = 0.01
    nn_momentum: float = 0.9
    nn_batch_size: int = 64
    nn_max_epochs: int = 30
    nn_patience: int = 5

    # sample sizes per run
    train_size: int = 10_000
    holdout_size: int = 2_000
    test_size: int = 2_000

    # synthetic generation
    synthetic_style: str = "prototypes"
    synthetic_classes: int = 10
    synthetic_image_size: int = 28
    synthetic_pool_per_class: int = 6_000
    synthetic_seed: int = 12345

    jobs: int = 1

    def validate(self) -> None:
        if self.dataset not in DATASET_NAMES:
            raise ConfigError(f"dataset must be one of {DATASET_NAMES}, got {self.dataset!r}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.max_iteration < 1:
            raise ConfigError("max_iteration must be >= 1")
        for name in ("p_g1", "p_g2", "p_s"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.target_classes:
            raise ConfigError("at least one target class is required")
        if min(self.train_size, self.holdout_size, self.test_size) < 2:
            raise ConfigError("train/holdout/test sizes must each be >= 2")
        if self.synthetic_style not in SYNTHETIC_STYLES:
            raise ConfigError(f"synthetic_style must be one of {SYNTHETIC_STYLES}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def sls_params(self, seed: int = 0) -> SlsParams:
        return SlsParams(k=self.k, max_iteration=self.max_iteration, p_g1=self.p_g1,
                         p_g2=self.p_g2, p_s=self.p_s, batch_size=self.batch_size,
                         restart_after=self.restart_after, seed=seed)

    def nn_params(self) -> bnn.TrainParams:
        return bnn.TrainParams(learning_rate=self.nn_learning_rate,
                               momentum=self.nn_momentum,
                               batch_size=self.nn_batch_size,
                               max_epochs=self.nn_max_epochs,
                               patience=self.nn_patience)


# --- config text format (flat key = value lines, '#' comments) -----------------

def config_to_text(cfg: ExperimentConfig) -> str:
    lines = ["# dcdl experiment configuration"]
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is list:
            return [int(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    if raw == "None":
        return None
    return raw


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    known = {f.name: f for f in fields(cfg)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        name, raw = (part.strip() for part in line.split("=", 1))
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {name!r}")
        current = getattr(cfg, name)
        kind = list if isinstance(current, list) else type(current) if current is not None else str
        setattr(cfg, name, _coerce(name, raw, kind))
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


# --- data loading ----------------------------------------------------------------

def load_experiment_data(cfg: ExperimentConfig):
    """Returns (train_pool, test_pool) of labeled grayscale images."""
    if cfg.dataset == "synthetic":
        gen = (datasets.synthetic_prototypes if cfg.synthetic_style == "prototypes"
               else lambda *a, **kw: datasets.synthetic_planted_dnf(*a, **kw)[0])
        train = gen(cfg.synthetic_classes, cfg.synthetic_pool_per_class,
                    cfg.synthetic_image_size, cfg.synthetic_image_size,
                    seed=cfg.synthetic_seed, split_tag="train")
        # the test pool must cover a balanced subset even for the target class
        test = gen(cfg.synthetic_classes, max(cfg.test_size, 200),
                   cfg.synthetic_image_size, cfg.synthetic_image_size,
                   seed=cfg.synthetic_seed + 1, split_tag="test")
        return train, test
    data_dir = datasets.resolve_data_dir(cfg.data_dir)
    if not data_dir:
        raise ConfigError(
            f"dataset {cfg.dataset!r} needs --data-dir or the {datasets.DATA_DIR_ENV} "
            "environment variable")
    if cfg.dataset in ("mnist", "fashion"):
        return datasets.load_mnist_dir(data_dir, fashion=cfg.dataset == "fashion")
    batches = [os.path.join(data_dir, f"data_batch_{i}.bin") for i in range(1, 6)]
    train = datasets.load_cifar10(batches, split_tag="train")
    test = datasets.load_cifar10(os.path.join(data_dir, "test_batch.bin"), split_tag="test")
    return train, test


# --- a single class x seed run -----------------------------------------------------

@dataclass
class RunResult:
    run_id: str
    target_class: int
    seed: int
    similarity: dict
    accuracy: dict
    artifacts: dict  # method -> serialized text


@dataclass
class RunFailure:
    run_id: str
    stage: str
    message: str


def _dither_all(images) -> list:
    return [binarize.dither_floyd_steinberg(img) for img in images]


def run_single(cfg: ExperimentConfig, train_pool, test_pool, target_class: int,
               seed: int, verbose: bool = False) -> RunResult:
    run_id = f"{cfg.dataset}-c{target_class}-s{seed}"

    def rng_for(stage: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(target_class, stage)))

    stage = "balance"
    try:
        balanced = binarize.balance_one_vs_all(
            train_pool, target_class, cfg.train_size + cfg.holdout_size, rng_for(0))
        train_set, holdout_set = datasets.split_holdout(balanced, cfg.holdout_size, rng_for(1))
        test_set = binarize.balance_one_vs_all(test_pool, target_class, cfg.test_size, rng_for(2))

        stage = "dither"
        train_planes = _dither_all(train_set.images)
        holdout_planes = _dither_all(holdout_set.images)
        test_planes = _dither_all(test_set.images)
        y_train = binarize.binary_labels(train_set, target_class)
        y_holdout = binarize.binary_labels(holdout_set, target_class)
        y_test = binarize.binary_labels(test_set, target_class)

        stage = "train-nn"
        sample = train_planes[0]
        arch = bnn.default_architecture(
            (sample.channels, sample.height, sample.width),
            filters1=cfg.nn_filters1, filters2=cfg.nn_filters2,
            filter_size=cfg.nn_filter_size, pool=cfg.nn_pool, dropout=cfg.nn_dropout)
        nn_seed = int(np.random.SeedSequence(
            entropy=seed, spawn_key=(target_class, 3)).generate_state(1, np.uint64)[0] >> np.uint64(1))
        model = bnn.build_model(arch, cfg.nn_params(), seed=nn_seed)
        model = bnn.train(model, train_planes, y_train, holdout_planes, y_holdout,
                          verbose=verbose)
        nn_train_pred = bnn.predict_classes(model, train_planes) == 1
        nn_holdout_pred = bnn.predict_classes(model, holdout_planes) == 1
        nn_test_pred = bnn.predict_classes(model, test_planes) == 1

        stage = "extract-dcdl"
        sls_seed, bb_seed, bb_label_seed = extraction._derived_seeds(seed, target_class, 4)
        dcdl_model = extraction.dcdl_train(
            model, train_planes, holdout_planes, cfg.sls_params(sls_seed),
            max_windows=cfg.max_windows, verbose=verbose)
        dcdl_pred = extraction.dcdl_predict_batch(dcdl_model, test_planes)

        stage = "extract-blackbox"
        bb_pred_formula = extraction.blackbox_train(
            train_planes, nn_train_pred, "nn_prediction", cfg.sls_params(bb_seed),
            validation_images=holdout_planes, validation_labels=nn_holdout_pred)
        bb_label_formula = extraction.blackbox_train(
            train_planes, y_train, "true_label", cfg.sls_params(bb_label_seed),
            validation_images=holdout_planes, validation_labels=y_holdout)
        flat_test = np.stack([p.as_instance().bits for p in test_planes])
        bb_pred_out = eval_formula_batch(bb_pred_formula, flat_test)
        bb_label_out = eval_formula_batch(bb_label_formula, flat_test)

        stage = "evaluate"
        predictions = {
            "neural_network": nn_test_pred,
            "dcdl": dcdl_pred,
            "bb_prediction": bb_pred_out,
            "bb_label": bb_label_out,
        }
        sim = {m: metrics.similarity(p, nn_test_pred) for m, p in predictions.items()}
        acc = {m: metrics.accuracy(p, y_test) for m, p in predictions.items()}
        artifacts = {
            "nn.json": bnn.model_to_json(model),
            "dcdl.txt": extraction.serialize_dcdl(dcdl_model),
            "bb_prediction.dnf": f"dnf {bb_pred_formula.n}\n{format_formula(bb_pred_formula)}\n",
            "bb_label.dnf": f"dnf {bb_label_formula.n}\n{format_formula(bb_label_formula)}\n",
        }
        return RunResult(run_id, target_class, seed, sim, acc, artifacts)
    except Exception as exc:
        raise _RunError(run_id, stage, exc) from exc


class _RunError(Exception):
    def __init__(self, run_id: str, stage: str, cause: Exception):
        super().__init__(f"{run_id} failed at {stage}: {cause}")
        self.run_id = run_id
        self.stage = stage
        self.cause = cause


# --- the full report ------------------------------------------------------------

@dataclass
class ExperimentReport:
    config: ExperimentConfig
    results: list
    failures: list
    csv_text: str
    table_text: str
    out_dir: str

    def mean_similarity(self, method: str) -> float:
        return float(np.mean([r.similarity[method] for r in self.results]))

    def mean_accuracy(self, method: str) -> float:
        return float(np.mean([r.accuracy[method] for r in self.results]))


_POOLS = None  # worker-process cache, filled before forking


def _run_task(args):
    cfg, target_class, seed = args
    train_pool, test_pool = _POOLS
    try:
        return run_single(cfg, train_pool, test_pool, target_class, seed)
    except _RunError as exc:
        return RunFailure(exc.run_id, exc.stage, str(exc.cause))


def run_experiment(cfg: ExperimentConfig, pools=None, verbose: bool = False) -> ExperimentReport:
    """Run every class x seed combination and write the report files."""
    global _POOLS
    cfg.validate()
    if pools is None:
        pools = load_experiment_data(cfg)
    _POOLS = pools
    tasks = [(cfg, c, s) for c in cfg.target_classes for s in cfg.seeds]

    outcomes = []
    if cfg.jobs > 1:
        import multiprocessing as mp

        ctx = mp.get_context("fork")
        with ctx.Pool(processes=cfg.jobs) as pool:
            outcomes = pool.map(_run_task, tasks)
    else:
        for task in tasks:
            if verbose:
                print(f"running class={task[1]} seed={task[2]}")
            outcomes.append(_run_task(task))

    results = sorted((o for o in outcomes if isinstance(o, RunResult)),
                     key=lambda r: (r.target_class, r.seed))
    failures = sorted((o for o in outcomes if isinstance(o, RunFailure)),
                      key=lambda f: f.run_id)

    csv_lines = [metrics.CSV_HEADER]
    for r in results:
        for method in METHODS:
            csv_lines.append(metrics.format_csv_row(
                r.run_id, r.target_class, r.seed, method,
                r.similarity[method], r.accuracy[method]))
    csv_text = "\n".join(csv_lines) + "\n"

    if len(results) >= 2:
        scores = {m: metrics.RunScores(np.array([r.accuracy[m] for r in results]),
                                       n_train=cfg.train_size, n_test=cfg.test_size)
                  for m in METHODS}
        table_text = metrics.render_pvalue_table(
            scores, order=["dcdl", "bb_prediction", "bb_label", "neural_network"],
            title=f"dataset: {cfg.dataset}, accuracy over {len(results)} runs")
    else:
        table_text = "not enough completed runs for a significance table\n"
    if failures:
        table_text += "\nfailed runs:\n" + "".join(
            f"  {f.run_id}: {f.stage}: {f.message}\n" for f in failures)

    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(config_to_text(cfg))
    with open(os.path.join(out_dir, "runs.csv"), "w") as fh:
        fh.write(csv_text)
    with open(os.path.join(out_dir, "pvalues.txt"), "w") as fh:
        fh.write(table_text)
    models_dir = os.path.join(out_dir, "models")
    os.makedirs(models_dir, exist_ok=True)
    for r in results:
        run_dir = os.path.join(models_dir, r.run_id)
        os.makedirs(run_dir, exist_ok=True)
        for name, text in r.artifacts.items():
            with open(os.path.join(run_dir, name), "w") as fh:
                fh.write(text)
    if failures:
        with open(os.path.join(out_dir, "failures.txt"), "w") as fh:
            for f in failures:
                fh.write(f"{f.run_id}\t{f.stage}\t{f.message}\n")

    return ExperimentReport(cfg, results, failures, csv_text, table_text, out_dir)
