import json
from pathlib import Path

import pytest

from run_config import (
    DEFAULT_CONFIG,
    ConfigError,
    RunConfig,
    apply_override,
    deep_merge,
    flatten,
    load_run_config,
    parse_override,
    unknown_keys,
)


class TestMerging:

    def test_deep_merge_keeps_siblings(self):
        merged = deep_merge({"a": {"x": 1, "y": 2}, "b": 3}, {"a": {"y": 5}})
        assert merged == {"a": {"x": 1, "y": 5}, "b": 3}

    def test_deep_merge_does_not_alias(self):
        base = {"a": {"x": [1]}}
        merged = deep_merge(base, {})
        merged["a"]["x"].append(2)
        assert base["a"]["x"] == [1]

    def test_flatten(self):
        assert flatten({"a": {"b": 1, "c": {}}, "d": None}) == {"a.b": 1, "a.c": {}, "d": None}


class TestOverrides:

    @pytest.mark.parametrize("text,keys,value", [
        ("vae.epochs=3", ["vae", "epochs"], 3),
        ("options.deterministic=false", ["options", "deterministic"], False),
        ("sampler.nfe_settings=[1, 3]", ["sampler", "nfe_settings"], [1, 3]),
        ("paths.camus_root=/data/camus", ["paths", "camus_root"], "/data/camus"),
        ("bench.threads=null", ["bench", "threads"], None),
    ])
    def test_parse(self, text, keys, value):
        assert parse_override(text) == (keys, value)

    @pytest.mark.parametrize("text", ["vae.epochs", "=3"])
    def test_malformed(self, text):
        with pytest.raises(ConfigError):
            parse_override(text)

    def test_cannot_descend_into_value(self):
        with pytest.raises(ConfigError):
            apply_override({"seed": 0}, ["seed", "x"], 1)


class TestValidation:

    def test_defaults_are_valid(self):
        assert unknown_keys(DEFAULT_CONFIG) == []

    def test_unknown_keys_reported_by_dotted_name(self):
        document = deep_merge(DEFAULT_CONFIG, {"vae": {"epoch": 3}, "extra": 1,
                                               "models": {"edm": {"schedule": "EDM", "depth": 4}}})
        with pytest.raises(ConfigError) as info:
            RunConfig(document)
        assert set(info.value.keys) == {"vae.epoch", "extra", "models.edm.depth"}
        assert "vae.epoch" in str(info.value)

    def test_model_entries_must_be_sections(self):
        assert unknown_keys({"models": {"edm": "EDM"}}) == ["models.edm"]


class TestLoading:

    def test_layering_order(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 4, "vae": {"epochs": 7}}))
        config = load_run_config(path, ["vae.epochs=9"], seed=11, out=tmp_path / "run")
        assert config.seed == 11
        assert config["vae"]["epochs"] == 9
        assert config["vae"]["batch_size"] == DEFAULT_CONFIG["vae"]["batch_size"]
        assert config.output_dir == tmp_path / "run"
        assert config.flat()["vae.epochs"] == 9

    def test_repository_config_is_valid(self):
        config = load_run_config(Path(__file__).resolve().parent.parent / "config.json")
        assert set(config["models"]) == {"ve", "vp", "edm", "edm_l32", "edm_l16"}

    def test_missing_and_invalid_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(bad)

    def test_unknown_override_key(self):
        with pytest.raises(ConfigError) as info:
            load_run_config(None, ["sampler.solver=euler"])
        assert info.value.keys == ["sampler.solver"]

    def test_resolved_config_and_manifest(self, tmp_path):
        config = load_run_config(None, [], seed=3, out=tmp_path)
        resolved = config.write_resolved(tmp_path)
        assert json.loads(resolved.read_text())["seed"] == 3

        config.update_manifest("phantom-gen", [tmp_path / "a"], models=["edm"])
        config.update_manifest("fit-prior", [tmp_path / "b"], models=["edm", "ve"])
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert [run["command"] for run in manifest["runs"]] == ["phantom-gen", "fit-prior"]
        assert manifest["models"] == ["edm", "ve"]
        assert manifest["runs"][0]["seed"] == 3
        assert manifest["tool"] == "GammaLDM"
