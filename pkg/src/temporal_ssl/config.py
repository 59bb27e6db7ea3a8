"""Plain-text run configuration (INI sections of ``key = value``).

Every key is declared in :data:`SCHEMA` with a parser and a default; unknown
sections or keys are rejected before any work starts. Command-line overrides
(``section.key=value``) are applied after the file and win over it.
"""

import configparser
import io
import os
from pathlib import Path

from .dataio import PreprocessConfig
from .model import NetworkConfig
from .synthclips import GeneratorConfig
from .trainer import OptimizerConfig, PretrainConfig, ProbeConfig

OUTPUT_ROOT_ENV = "TEMPORAL_SSL_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _bool(text):
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(item):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return tuple(item(t) for t in text)
        parts = [p.strip() for p in str(text).split(",") if p.strip()]
        return tuple(item(p) for p in parts)
    return parse


def _opt_str(text):
    text = str(text).strip()
    return text or None


def _opt_float(text):
    text = str(text).strip()
    return float(text) if text and text.lower() != "none" else None


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


SCHEMA = {
    "run": {
        "seed": (int, 0),
        "output_dir": (_opt_str, None),
    },
    "data": {
        "corpus_dir": (_opt_str, None),
        "n_train": (int, 400),
        "n_test": (int, 100),
        "length": (int, 128),
        "size": (int, 64),
        "n_classes": (int, 4),
        "grayscale": (_bool, False),
        "texture_amplitude": (float, 0.05),
        "boundary": (str, "reflect"),
        "workers": (int, 1),
        "cache_videos": (int, 1024),
    },
    "preprocess": {
        "resize_h": (int, 128),
        "resize_w": (int, 171),
        "crop": (int, 112),
        "flip_prob": (float, 0.5),
    },
    "sampler": {
        "kappa_cap": (int, 3),
    },
    "model": {
        "channels": (_list(int), (32, 64, 128, 128, 128)),
        "temporal_pool": (_list(_bool), (False, True, True, True, True)),
        "fc_width": (int, 512),
    },
    "optimizer": {
        "beta1": (float, 0.9),
        "beta2": (float, 0.99),
        "weight_decay": (float, 1e-4),
        "lr_pretrain": (float, 3e-4),
        "lr_transfer": (float, 5e-5),
        "lr_final_factor": (float, 1e-3),
    },
    "pretrain": {
        "epochs": (int, 10),
        "videos_per_batch": (int, 7),
        "holdout_fraction": (float, 0.1),
        "eval_repeats": (int, 2),
        "checkpoint_every": (int, 0),
        "augment": (_bool, True),
    },
    "eval": {
        "checkpoint": (_opt_str, None),
        "freeze": (str, "conv"),
        "probe_epochs": (int, 30),
        "probe_hidden": (int, 512),
        "probe_lr": (_opt_float, None),
        "probe_batch": (int, 32),
        "features_per_video": (int, 4),
        "kappa": (int, 2),
        "test_crops": (int, 10),
        "sync_per_video": (int, 32),
        "sync_test_per_video": (int, 8),
        "sync_windows": (int, 13),
        "order_per_video": (int, 2),
        "k_values": (_list(int), (1, 5, 10, 20, 50)),
        "saliency_videos": (int, 4),
        "saliency_head": (str, "motion"),
        "saliency_class": (int, 0),
    },
}


class RunConfig:
    def __init__(self, values: dict):
        self.values = values
        self.validate()

    def __getitem__(self, section):
        return self.values[section]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()})

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        values = cls.defaults().values
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                parser.read(path)
            except configparser.Error as err:
                raise ConfigError(f"cannot parse {path}: {err}".replace("\n", " ")) from err
            for section in parser.sections():
                for key, text in parser.items(section):
                    _assign(values, section, key, text)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            dotted, text = item.split("=", 1)
            section, key = dotted.strip().split(".", 1)
            _assign(values, section, key, text)
        return cls(values)

    def validate(self):
        try:
            self.generator()
            pre = self.preprocess()
            self.network(pre)
            self.optimizer()
            self.pretrain()
            self.probe()
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err
        ev = self.values["eval"]
        if ev["freeze"] not in ("conv", "none"):
            raise ConfigError("eval.freeze must be 'conv' or 'none'")
        if ev["saliency_head"] not in ("motion", "speed"):
            raise ConfigError("eval.saliency_head must be 'motion' or 'speed'")
        if not 0 <= self.values["sampler"]["kappa_cap"] <= 3:
            raise ConfigError("sampler.kappa_cap must be in 0..3")
        if not 0 <= ev["kappa"] <= 3:
            raise ConfigError("eval.kappa must be in 0..3")
        if ev["sync_windows"] < 7:
            raise ConfigError("eval.sync_windows must be >= 7 so every offset in -6..6 fits")
        if any(k < 1 for k in ev["k_values"]):
            raise ConfigError("eval.k_values must be positive")
        d = self.values["data"]
        if d["n_train"] < 1 or d["n_test"] < 1 or d["workers"] < 1:
            raise ConfigError("data.n_train, data.n_test and data.workers must be >= 1")

    # -- typed views ---------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def output_dir(self) -> Path:
        out = self.values["run"]["output_dir"]
        if out is None:
            out = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        return Path(out)

    def corpus_dir(self) -> Path:
        c = self.values["data"]["corpus_dir"]
        return Path(c) if c else self.output_dir() / "corpus"

    def checkpoint_path(self) -> Path:
        c = self.values["eval"]["checkpoint"]
        return Path(c) if c else self.output_dir() / "checkpoint.pt"

    def generator(self) -> GeneratorConfig:
        d = self.values["data"]
        return GeneratorConfig(n_classes=d["n_classes"], length=d["length"], size=d["size"],
                               grayscale=d["grayscale"], texture_amplitude=d["texture_amplitude"],
                               boundary=d["boundary"])

    def preprocess(self) -> PreprocessConfig:
        p = self.values["preprocess"]
        channels = 1 if self.values["data"]["grayscale"] else 3
        return PreprocessConfig(resize_h=p["resize_h"], resize_w=p["resize_w"], crop=p["crop"],
                                flip_prob=p["flip_prob"], mean=(0.5,) * channels, std=(0.25,) * channels)

    def network(self, pre: PreprocessConfig | None = None) -> NetworkConfig:
        m = self.values["model"]
        pre = pre or self.preprocess()
        return NetworkConfig(channels=m["channels"], temporal_pool=m["temporal_pool"], fc_width=m["fc_width"],
                             in_channels=len(pre.mean), input_size=pre.crop)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(**self.values["optimizer"])

    def pretrain(self) -> PretrainConfig:
        p = self.values["pretrain"]
        return PretrainConfig(kappa_cap=self.values["sampler"]["kappa_cap"],
                              cache_videos=self.values["data"]["cache_videos"], **p)

    def probe(self) -> ProbeConfig:
        e = self.values["eval"]
        return ProbeConfig(epochs=e["probe_epochs"], batch_size=e["probe_batch"], hidden=e["probe_hidden"],
                           lr=e["probe_lr"], features_per_video=e["features_per_video"], kappa=e["kappa"],
                           test_crops=e["test_crops"])

    # -- snapshots -----------------------------------------------------------

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, keys in self.values.items():
            parser[section] = {k: _fmt(v) for k, v in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def _assign(values, section, key, text):
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    parse = SCHEMA[section][key][0]
    try:
        values[section][key] = parse(text)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad value for {section}.{key}: {text!r} ({err})") from err
