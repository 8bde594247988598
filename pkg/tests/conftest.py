from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pipescore.corpus import write_wav

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("ci")


@pytest.fixture
def wav_dir(tmp_path: Path):
    """Three 10 s mono files at 16 kHz plus a JSONL manifest referencing them."""
    rng = np.random.default_rng(0)
    rows = []
    for i in range(3):
        write_wav(tmp_path / f"a{i}.wav", 0.1 * rng.standard_normal(160000), 16000)
        rows.append({"id": f"u{i}", "path": f"a{i}.wav", "speaker_id": "s"})
    (tmp_path / "manifest.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return tmp_path


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
