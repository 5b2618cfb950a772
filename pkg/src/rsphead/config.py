"""Run configuration: a flat key = value namespace shared by all commands.

Configuration comes from an optional file of ``key = value`` lines
(``#`` starts a comment) overlaid with command-line ``--key value`` pairs.
Unknown keys are rejected.  The full key table with defaults:

======================  =========  =============================================
key                     default    meaning
======================  =========  =============================================
head                    rsp2       baseline | rsp2 | rsp4 | custom
sites                   (empty)    custom chain, e.g. ``54:rsp,43:sum,32:sum``
num_classes             4          output classes
trunk.channels          128        pyramid/trunk width C
backbone.widths         32,64,96,128  stage widths at strides 4/8/16/32
q.blocks                2          conv+rectifier blocks per pyramid level
rse.k                   7          relation window size (odd)
rse.dilation            1          relation window dilation
rse.d                   2          query/key channel reduction
rse.cv                  0          value channels (0 means trunk width)
rse.softmax             true       normalize window scores
rse.scale               false      scale scores by 1/sqrt(C/d)
rse.<site>.<field>      --         per-site override, e.g. ``rse.54.k = 3``
seed                    0          model init and training stream seed
train.steps             2000       number of updates
train.batch_size        8          images per update
train.base_lr           0.01       post-warmup learning rate
train.warmup_start_lr   0.001      learning rate at step 0
train.warmup_steps      100        linear warmup length
train.schedule          (empty)    phases ``steps:lr,steps:lr``; empty = flat
train.momentum          0.9        classical momentum
train.weight_decay      0.0001     L2 coupling into the gradient
train.hflip             true       horizontal flip augmentation
train.eval_every        200        eval cadence in steps (0 = off)
train.log_every         50         metrics line cadence
data.size               64         image extent
data.colors             3          marker colors (classes = colors + 1)
data.patches            4          patches per image
data.patch_size         6          patch extent
data.marker_size        8          marker extent
data.noise_std          0.05       additive Gaussian noise
data.count              400        training samples
data.eval_count         100        evaluation samples
data.seed               100        training data seed
data.eval_seed          900        evaluation data seed
data_dir                (empty)    read training data from PPM/PGM pairs
eval_dir                (empty)    read evaluation data from PPM/PGM pairs
checkpoint              (empty)    checkpoint path (eval / dump-attn input)
out                     runs/out   output directory
count.input             512x1024   extents for FLOP accounting
dump.site               54         fusion site for attention dumps
dump.image              (empty)    input PPM for attention dumps
dump.pixel              0,0        query pixel (row,col) on the site's low map
dump.channels           4          query/key channel maps to dump
======================  =========  =============================================
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from rsphead.data import MarkerDatasetSpec
from rsphead.pyramid import FusionSite, HeadConfig, RseConfig
from rsphead.training import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "DEFAULTS"]


class ConfigError(ValueError):
    """Raised for unknown keys, unparsable values, or conflicting settings."""


DEFAULTS: dict = {
    "head": "rsp2",
    "sites": "",
    "num_classes": 4,
    "trunk.channels": 128,
    "backbone.widths": "32,64,96,128",
    "q.blocks": 2,
    "rse.k": 7,
    "rse.dilation": 1,
    "rse.d": 2,
    "rse.cv": 0,
    "rse.softmax": True,
    "rse.scale": False,
    "seed": 0,
    "train.steps": 2000,
    "train.batch_size": 8,
    "train.base_lr": 0.01,
    "train.warmup_start_lr": 0.001,
    "train.warmup_steps": 100,
    "train.schedule": "",
    "train.momentum": 0.9,
    "train.weight_decay": 1e-4,
    "train.hflip": True,
    "train.eval_every": 200,
    "train.log_every": 50,
    "data.size": 64,
    "data.colors": 3,
    "data.patches": 4,
    "data.patch_size": 6,
    "data.marker_size": 8,
    "data.noise_std": 0.05,
    "data.count": 400,
    "data.eval_count": 100,
    "data.seed": 100,
    "data.eval_seed": 900,
    "data_dir": "",
    "eval_dir": "",
    "checkpoint": "",
    "out": "runs/out",
    "count.input": "512x1024",
    "dump.site": "54",
    "dump.image": "",
    "dump.pixel": "0,0",
    "dump.channels": 4,
}

_SITE_OVERRIDE = re.compile(r"^rse\.(\d{2})\.(k|dilation|d|cv|softmax|scale)$")
_HEAD_PRESETS = {"baseline": (5, ()), "rsp2": (5, (4, 3)), "rsp4": (7, (6, 5, 4, 3))}


def _convert(key: str, raw, template) -> object:
    if not isinstance(raw, str):
        return raw  # already typed (a default)
    text = raw.strip()
    try:
        if isinstance(template, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError
            return low == "true"
        if isinstance(template, int):
            return int(text)
        if isinstance(template, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"unparsable value for '{key}': {raw!r}") from None


@dataclass
class RunConfig:
    """Typed view over the flat key space."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def echo_lines(self) -> list:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return lines

    # -- structured views ------------------------------------------------------

    def _site_overrides(self, code: str) -> dict:
        out = {}
        for key, value in self.values.items():
            m = _SITE_OVERRIDE.match(key)
            if m and m.group(1) == code:
                out[m.group(2)] = value
        return out

    def _rse_config(self, code: str) -> RseConfig:
        v = dict(
            k=self["rse.k"], dilation=self["rse.dilation"], d=self["rse.d"],
            cv=self["rse.cv"], softmax=self["rse.softmax"], scale=self["rse.scale"],
        )
        v.update(self._site_overrides(code))
        return RseConfig(
            k=v["k"], dilation=v["dilation"], d=v["d"],
            cv=None if v["cv"] == 0 else v["cv"],
            normalize=v["softmax"], scale_logits=v["scale"],
        )

    def _site_modes(self) -> list:
        head = self["head"]
        sites_text = self["sites"].strip()
        if head != "custom" and sites_text:
            raise ConfigError("conflicting settings: 'sites' is only valid with head = custom")
        if head in _HEAD_PRESETS:
            top, rsp_lows = _HEAD_PRESETS[head]
            return [(high, high - 1, "rsp" if high - 1 in rsp_lows else "sum")
                    for high in range(top, 2, -1)]
        if head != "custom":
            raise ConfigError(f"unknown head '{head}' (expected baseline, rsp2, rsp4, or custom)")
        if not sites_text:
            raise ConfigError("head = custom needs a 'sites' chain, e.g. 54:rsp,43:sum,32:sum")
        modes = []
        for part in sites_text.split(","):
            m = re.fullmatch(r"\s*(\d)(\d)\s*:\s*(rsp|sum)\s*", part)
            if not m:
                raise ConfigError(f"bad site entry {part!r}, expected like '54:rsp'")
            modes.append((int(m.group(1)), int(m.group(2)), m.group(3)))
        return modes

    def head_config(self) -> HeadConfig:
        widths = self["backbone.widths"].split(",")
        try:
            widths = tuple(int(w.strip()) for w in widths)
        except ValueError:
            raise ConfigError(f"unparsable backbone.widths: {self['backbone.widths']!r}") from None
        sites = []
        for high, low, mode in self._site_modes():
            rse = self._rse_config(f"{high}{low}") if mode == "rsp" else None
            sites.append(FusionSite(high=high, low=low, mode=mode, rse=rse))
        try:
            return HeadConfig(
                num_classes=self["num_classes"], sites=tuple(sites),
                trunk_channels=self["trunk.channels"], backbone_widths=widths,
                q_blocks=self["q.blocks"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def train_config(self) -> TrainConfig:
        schedule = []
        text = self["train.schedule"].strip()
        if text:
            for part in text.split(","):
                m = re.fullmatch(r"\s*(\d+)\s*:\s*([0-9.eE+-]+)\s*", part)
                if not m:
                    raise ConfigError(f"bad schedule phase {part!r}, expected like '1000:0.01'")
                schedule.append((int(m.group(1)), float(m.group(2))))
        try:
            return TrainConfig(
                total_steps=self["train.steps"], batch_size=self["train.batch_size"],
                base_lr=self["train.base_lr"], warmup_start_lr=self["train.warmup_start_lr"],
                warmup_steps=self["train.warmup_steps"], schedule=tuple(schedule),
                momentum=self["train.momentum"], weight_decay=self["train.weight_decay"],
                seed=self["seed"], hflip=self["train.hflip"],
                eval_every=self["train.eval_every"], log_every=self["train.log_every"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def dataset_spec(self, split: str = "train") -> MarkerDatasetSpec:
        if split == "train":
            count, seed = self["data.count"], self["data.seed"]
        elif split == "eval":
            count, seed = self["data.eval_count"], self["data.eval_seed"]
        else:
            raise ValueError(f"unknown split '{split}'")
        try:
            return MarkerDatasetSpec(
                count=count, size=self["data.size"], num_colors=self["data.colors"],
                patches_per_image=self["data.patches"], patch_size=self["data.patch_size"],
                marker_size=self["data.marker_size"], noise_std=self["data.noise_std"],
                seed=seed,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def count_input(self) -> tuple:
        m = re.fullmatch(r"\s*(\d+)\s*x\s*(\d+)\s*", self["count.input"])
        if not m:
            raise ConfigError(f"bad count.input {self['count.input']!r}, expected like 512x1024")
        return int(m.group(1)), int(m.group(2))

    def dump_pixel(self) -> tuple:
        m = re.fullmatch(r"\s*(\d+)\s*,\s*(\d+)\s*", self["dump.pixel"])
        if not m:
            raise ConfigError(f"bad dump.pixel {self['dump.pixel']!r}, expected like 12,40")
        return int(m.group(1)), int(m.group(2))


def _assign(values: dict, key: str, raw, where: str) -> None:
    if key in DEFAULTS:
        values[key] = _convert(key, raw, DEFAULTS[key])
        return
    m = _SITE_OVERRIDE.match(key)
    if m:
        field = m.group(2)
        template = {"k": 0, "dilation": 0, "d": 0, "cv": 0, "softmax": True, "scale": False}[field]
        values[key] = _convert(key, raw, template)
        return
    raise ConfigError(f"unknown config key '{key}' ({where})")


def parse_config(path=None, overrides: Sequence = ()) -> RunConfig:
    """Load defaults, then a config file, then ``(key, value)`` overrides."""
    values = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            hash_at = line.find("#")
            if hash_at >= 0:
                line = line[:hash_at]
            line = line.strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not eq or not key:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            _assign(values, key, value, f"{path}:{lineno}")
    for key, value in overrides:
        _assign(values, key, value, "command line")
    return RunConfig(values=values)
