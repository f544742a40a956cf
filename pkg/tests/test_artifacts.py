#!/usr/bin/env python3
"""
Test suite for CSV artifacts and run manifests.
"""

import json
import sys
from pathlib import Path

import pandas as pd
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from evshare.artifacts import (
    MANIFEST_NAME,
    ArtifactWriter,
    RunManifest,
    compare_artifacts,
    sha256_file,
    write_frame,
)
from evshare.errors import ConfigError


def _manifest(**overrides):
    fields = dict(command="allocate", options={"state": "1;1"}, config=None, config_hash=None,
                  base_dir=".", seed=0, jobs=1, model="distflow")
    fields.update(overrides)
    return RunManifest(**fields)


class TestWriteFrame:
    def test_float_format(self, tmp_path):
        path = write_frame(pd.DataFrame({"node": [1], "p": [1.0 / 3.0]}), tmp_path / "sub" / "out.csv")
        assert path.read_text() == "node,p\n1,0.333333333\n"

    def test_identical_frames_identical_hash(self, tmp_path):
        frame = pd.DataFrame({"x": [0.1, 0.2, 0.3]})
        first = write_frame(frame, tmp_path / "a.csv")
        second = write_frame(frame.copy(), tmp_path / "b.csv")
        assert sha256_file(first) == sha256_file(second)


class TestArtifactWriter:
    """Test the single writer and its manifest."""

    def test_manifest_records_hashes(self, tmp_path):
        writer = ArtifactWriter(tmp_path)
        writer.frame("one.csv", pd.DataFrame({"a": [1, 2]}))
        writer.frame("two.csv", pd.DataFrame({"b": [3.5]}))
        path = writer.finish(_manifest())
        assert path == tmp_path / MANIFEST_NAME
        data = json.loads(path.read_text())
        assert sorted(data["artifacts"]) == ["one.csv", "two.csv"]
        assert data["artifacts"]["one.csv"] == sha256_file(tmp_path / "one.csv")
        assert data["versions"]["evshare"]

    def test_manifest_round_trip(self, tmp_path):
        writer = ArtifactWriter(tmp_path)
        writer.frame("one.csv", pd.DataFrame({"a": [1]}))
        writer.finish(_manifest(seed=7))
        loaded = RunManifest.from_file(tmp_path)
        assert loaded.seed == 7
        assert loaded.options == {"state": "1;1"}
        assert "one.csv" in loaded.artifacts

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ConfigError):
            RunManifest.from_file(tmp_path / MANIFEST_NAME)

    def test_not_a_manifest(self, tmp_path):
        (tmp_path / MANIFEST_NAME).write_text(json.dumps({"command": "simulate"}))
        with pytest.raises(ConfigError):
            RunManifest.from_file(tmp_path)


class TestCompare:
    def test_differences(self):
        expected = _manifest()
        expected.artifacts = {"a.csv": "1", "b.csv": "2", "c.csv": "3"}
        actual = _manifest()
        actual.artifacts = {"a.csv": "1", "b.csv": "x", "d.csv": "4"}
        assert compare_artifacts(expected, actual) == ["b.csv", "c.csv", "d.csv"]

    def test_identical(self):
        expected = _manifest()
        expected.artifacts = {"a.csv": "1"}
        assert compare_artifacts(expected, expected) == []


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
