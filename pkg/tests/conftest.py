import sys
from pathlib import Path

import pytest

from fragdiff import synthworld

STUB = Path(__file__).parent / "stub_trainer.py"


def stub_command(mode: str, extra: str = "") -> str:
    base = f"{sys.executable} {STUB} {mode} --dataset {{dataset}} --features-in {{features_in}} --features-out {{features_out}}"
    return f"{base} {extra}".strip()


def write_config(path: Path, world: dict, trainer: str, **overrides) -> Path:
    lines = [
        f"features = {world['features']}",
        f"gt_store = {world['gt_store']}",
        f"pred_store = {world['pred_store']}",
        f"patch_store = {world['patch_store']}",
        f"eval_gt_store = {world['eval_gt_store']}",
        f'trainer = "{trainer}"',
        "k = 8",
        "alpha = 0.99",
        "nn = 6",
        "threshold = 1e-8",
        "max_iterations = 2",
    ]
    for key, value in overrides.items():
        lines = [line for line in lines if not line.startswith(f"{key} ")]
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def synth_world(tmp_path):
    return synthworld.build_world(tmp_path / "world", n_source=36, m_target=36, d=12, clusters=3, seed=5)
