"""Run configuration: one INI file with [run], [synth], [encoder] and [train] sections."""

import configparser
import dataclasses
import io as _io
import typing
from dataclasses import dataclass, field, replace

from .data import DataError, SynthConfig, n_classes
from .encoder import EncoderConfig, EncoderError
from .recurrent import HeadError
from .training import SYNTHETIC_ENCODER, SYNTHETIC_TRAIN, TrainConfig, TrainingError

PRESETS = ("reference", "synthetic")
RUN_KEYS = ("seed", "mode", "preset")
# seed and mode live in [run] and are copied into the training config
TRAIN_SKIP = ("seed", "mode")


class ConfigError(ValueError):
    pass


def parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse(kind, text, where):
    try:
        if kind is bool:
            return parse_bool(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _fields(cls, skip=()):
    """Field name -> resolved type."""
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.name not in skip}


def preset_values(preset):
    if preset == "reference":
        return {}, {}
    if preset == "synthetic":
        return dict(SYNTHETIC_ENCODER), dict(SYNTHETIC_TRAIN)
    raise ConfigError(f"preset must be one of {PRESETS}, got {preset!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "binary"
    preset: str = "reference"
    synth: SynthConfig = field(default_factory=SynthConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_preset(cls, preset="reference", seed=0, mode="binary"):
        enc, tr = preset_values(preset)
        return cls(seed, mode, preset, SynthConfig(), EncoderConfig(**enc),
                   TrainConfig(seed=seed, mode=mode, **tr))

    def with_overrides(self, seed=None, mode=None, **train):
        """Command-line overrides; seed and mode propagate into the training config."""
        seed = self.seed if seed is None else int(seed)
        mode = self.mode if mode is None else mode
        try:
            tcfg = replace(self.train, seed=seed, mode=mode, **train)
        except (TrainingError, DataError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        return replace(self, seed=seed, mode=mode, train=tcfg)

    def dumps(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed), "mode": self.mode, "preset": self.preset}
        for name, obj, skip in (("synth", self.synth, ()), ("encoder", self.encoder, ()),
                                ("train", self.train, TRAIN_SKIP)):
            cp[name] = {k: _fmt(getattr(obj, k)) for k in _fields(type(obj), skip)}
        buf = _io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def loads(text, where="<config>"):
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc}") from None
    unknown = [s for s in cp.sections() if s not in ("run", "synth", "encoder", "train")]
    if unknown:
        raise ConfigError(f"{where}: unknown section [{unknown[0]}]")
    run = dict(cp["run"]) if cp.has_section("run") else {}
    bad = sorted(set(run) - set(RUN_KEYS))
    if bad:
        raise ConfigError(f"{where}: unknown key {bad[0]!r} in [run]")
    seed = _parse(int, run.get("seed", "0"), f"{where} [run] seed")
    mode = run.get("mode", "binary").strip()
    preset = run.get("preset", "reference").strip()
    if seed < 0:
        raise ConfigError(f"{where}: seed must be non-negative")
    try:
        n_classes(mode)
    except DataError:
        raise ConfigError(f"{where}: mode must be binary or three, got {mode!r}") from None
    enc_base, train_base = preset_values(preset)
    sections = {}
    for name, cls, skip, base in (("synth", SynthConfig, (), {}),
                                  ("encoder", EncoderConfig, (), enc_base),
                                  ("train", TrainConfig, TRAIN_SKIP, train_base)):
        fields = _fields(cls, skip)
        values = dict(base)
        if cp.has_section(name):
            for key, text in cp[name].items():
                if key not in fields:
                    raise ConfigError(f"{where}: unknown key {key!r} in [{name}]")
                values[key] = _parse(fields[key], text, f"{where} [{name}] {key}")
        sections[name] = values
    try:
        synth = SynthConfig(**sections["synth"]).validate()
        enc = EncoderConfig(**sections["encoder"])
        train = TrainConfig(seed=seed, mode=mode, **sections["train"])
        train.head_config(enc)
    except (DataError, EncoderError, TrainingError, HeadError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return RunConfig(seed, mode, preset, synth, enc, train)


def load(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text, path)
