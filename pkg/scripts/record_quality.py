"""Run the 2-2 continual schedule and the joint oracle with default settings; record both scores."""
import json
import sys
import tempfile
from pathlib import Path

from dcss.config import ExperimentConfig
from dcss.experiment import run_experiment

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "quality.json"


def main(out=OUT):
    base = ExperimentConfig()
    record = {"config": base.to_dict(), "tolerance": 0.05}
    with tempfile.TemporaryDirectory() as tmp:
        for name, cfg in (("continual", base.replace(schedule="2-2")), ("joint", base.replace(schedule="joint"))):
            res = run_experiment(cfg, Path(tmp) / name, save_checkpoints=False)
            record[name] = res["report"]["final"]
    record["gap"] = record["continual"]["miou_all"] - record["joint"]["miou_all"]
    Path(out).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: record[k]["miou_all"] for k in ("continual", "joint")}))


if __name__ == "__main__":
    main(*sys.argv[1:])
