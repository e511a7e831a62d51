"""Packaged frozen checkpoints and the recipe that rebuilds them."""
from __future__ import annotations

import json
from pathlib import Path

from .backbone import Grounder
from .cas import PretrainConfig, Segmenter, pretrain_segmenter
from .errors import StateError
from .pretext import PretextConfig, pretrain_grounder
from .synth_data import DatasetSpec, class_agnostic_pairs, generate_dataset

FIXTURE_DIR = Path(__file__).parent / "fixtures"
BACKBONE_FILE = "backbone.bin"
SEGMENTER_FILE = "segmenter.bin"
REPORT_FILE = "fixtures.json"

# held out from every benchmark: different palette size and seed
PRETEXT_SPEC = DatasetSpec(num_classes=9, samples_per_class=60, seed=1001)


def load_grounder(path=None) -> Grounder:
    path = Path(path) if path else FIXTURE_DIR / BACKBONE_FILE
    if not path.exists():
        raise StateError(f"frozen backbone fixture missing: {path}")
    return Grounder.load(path)


def load_segmenter(path=None) -> Segmenter:
    path = Path(path) if path else FIXTURE_DIR / SEGMENTER_FILE
    if not path.exists():
        raise StateError(f"segmenter fixture missing: {path}")
    return Segmenter.load(path)


def build_fixtures(out_dir=FIXTURE_DIR, pretext=PretextConfig(), seg_config=PretrainConfig(), log=print) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(PRETEXT_SPEC)
    grounder = pretrain_grounder(data, config=pretext, log=log)
    grounder.save(out_dir / BACKBONE_FILE)
    # reload so the segmenter trains on exactly the float32 weights that ship
    grounder = Grounder.load(out_dir / BACKBONE_FILE)
    seg, report = pretrain_segmenter(class_agnostic_pairs(data), grounder, seg_config, log=log)
    seg.save(out_dir / SEGMENTER_FILE)
    report = {**report, **grounder.checksums(), "segmenter": Segmenter.load(out_dir / SEGMENTER_FILE).checksum()}
    (out_dir / REPORT_FILE).write_text(json.dumps(report, indent=2))
    return report


if __name__ == "__main__":
    print(build_fixtures())
