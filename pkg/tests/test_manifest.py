"""Tests for run manifests."""

from skiperase.manifest import TOOL_VERSION, RunManifest


class TestRunManifest:
    def test_roundtrip(self, tmp_path):
        m = RunManifest(command="erase", config={"steps": 3, "strength": 1.0},
                        seeds={"train": 7}, input_hashes={"base": "abc"},
                        output_paths={"adapter": "a.npz"},
                        output_hashes={"adapter": "def"})
        path = tmp_path / "runs" / "manifest.json"
        m.save(path)  # creates parent directory
        back = RunManifest.load(path)
        assert back.to_dict() == m.to_dict()
        assert back.tool_version == TOOL_VERSION

    def test_defaults(self):
        m = RunManifest(command="gen-data", config={})
        d = m.to_dict()
        assert d["seeds"] == {} and d["output_hashes"] == {}
        assert d["platform"]  # non-empty platform string
