import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from dvf import cli
from dvf.config import RunConfig, load_config, parse_override
from dvf.detector import DetectionResult
from dvf.errors import ConfigurationError, NumericsError, ProviderError
from dvf.retrieval import EmbeddingStore, EvalReport

TINY = [
    "model.image_size=64",
    "model.depth=2",
    "model.dim=16",
    "model.heads=2",
    "train.epochs=2",
    "train.batch_size=4",
    "eval.ks=[1,2]",
]


def args_for(corpus: Path, out: Path, *extra: str) -> list[str]:
    sets = TINY + [f"dataset.root='{corpus / 'images'}'", f"ovf.fixtures='{corpus / 'detections'}'", *extra]
    return ["--preset", "toy", "--output-dir", str(out)] + [a for s in sets for a in ("--set", s)]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", str(root), "--classes", "3", "--per-class", "6", "--size", "96"]) == 0
    return root


# ---------------------------------------------------------------- config


def test_defaults_trace_to_documented_values():
    cfg = load_config()
    assert (cfg.train.lr, cfg.train.batch_size, cfg.train.epochs, cfg.train.beta) == (3e-2, 32, 10, 0.5)
    assert (cfg.ovf.alpha, cfg.ovf.enlarge_factor, cfg.ovf.aspect) == (0.5, 1.1, [3, 4])
    assert (cfg.model.depth, cfg.model.dim, cfg.model.heads, cfg.model.k) == (12, 768, 12, 12)
    assert cfg.eval.ks == [1, 2, 4, 8]


def test_toy_preset_and_typed_overrides():
    cfg = load_config(preset="toy", overrides=["train.lr=0.5", "ovf.enabled=false", "train.augmentation.hue=0.2"])
    assert cfg.model.dim == 64 and cfg.train.lr == 0.5 and cfg.ovf.enabled is False
    assert cfg.train.augmentation.hue == 0.2


def test_bare_word_override_is_string():
    assert parse_override("dataset.root=some/dir") == (["dataset", "root"], "some/dir")


@pytest.mark.parametrize("bad", ["train.nope=1", "nokey", "train=3"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigurationError):
        load_config(overrides=[bad])


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        load_config(preset="huge")


def test_toml_file_and_round_trip(tmp_path):
    (tmp_path / "run.toml").write_text('output_dir = "x"\n[model]\nk = 7\n[train.augmentation]\nblur_prob = 0.0\n')
    cfg = load_config(tmp_path / "run.toml", overrides=["model.k=9"])
    assert cfg.model.k == 9 and cfg.output_dir == "x" and cfg.train.augmentation.blur_prob == 0.0
    (tmp_path / "again.toml").write_text(cfg.to_toml())
    assert load_config(tmp_path / "again.toml") == cfg


def test_invalid_value_is_configuration_error():
    with pytest.raises(ConfigurationError):
        load_config(overrides=["train.beta=1.5"]).train.to_train()


# ---------------------------------------------------------------- exit codes


def test_exit_code_configuration(tmp_path, capsys):
    assert cli.main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
    assert "not found" in capsys.readouterr().err


def test_exit_code_missing_checkpoint(tmp_path, capsys):
    assert cli.main(["embed", "--output-dir", str(tmp_path)]) == 2
    assert "dvf train" in capsys.readouterr().err


def test_exit_code_data(tmp_path):
    root = tmp_path / "imgs"
    (root / "a").mkdir(parents=True)
    (root / "b").mkdir()
    Image.new("RGB", (40, 40)).save(root / "a" / "0.png")
    Image.new("RGB", (40, 40)).save(root / "b" / "0.png")
    Image.new("RGB", (40, 40)).save(root / "b" / "1.png")
    code = cli.main(["train", "--output-dir", str(tmp_path / "o"), "--set", f"dataset.root='{root}'",
                     "--set", "dataset.split_mode=closed", "--set", "ovf.enabled=false"])
    assert code == 3


def test_exit_code_provider(corpus, tmp_path):
    fixtures = tmp_path / "fx"
    shutil.copytree(corpus / "detections", fixtures)
    first = sorted((fixtures / "c000_disk_hstripes").iterdir())[0]
    first.write_text("{broken")
    args = args_for(corpus, tmp_path / "o", f"ovf.fixtures='{fixtures}'")
    assert cli.main(["preprocess", *args]) == 4


def test_exit_code_numerics(corpus, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericsError("loss went NaN")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", *args_for(corpus, tmp_path, "ovf.enabled=false")]) == 5


def test_ovf_enabled_without_preprocess_is_actionable(corpus, tmp_path, capsys):
    assert cli.main(["train", *args_for(corpus, tmp_path)]) == 2
    assert "dvf preprocess" in capsys.readouterr().err


# ---------------------------------------------------------------- preprocess


def _tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_preprocess_below_alpha_is_byte_identical(corpus, tmp_path, capsys):
    out = tmp_path / "o"
    assert cli.main(["preprocess", *args_for(corpus, out, "ovf.alpha=1.0")]) == 0
    assert _tree_bytes(out / "processed") == _tree_bytes(corpus / "images")
    line = capsys.readouterr().out
    assert "18 images" in line and "used_detection rate 0.000" in line


class _FlakyProvider:
    name = "flaky"

    def __init__(self, fail_after=None):
        self.calls = 0
        self.fail_after = fail_after

    def detect(self, image, prompt, image_id=None):
        if self.fail_after is not None and self.calls >= self.fail_after:
            raise ProviderError("provider went away")
        self.calls += 1
        w, h = image.size
        return [DetectionResult((w / 4, h / 4, w / 2, h / 2), 0.9, prompt)]


def test_preprocess_resumes_after_failure(corpus, tmp_path):
    cfg = load_config(preset="toy", overrides=[f"dataset.root='{corpus / 'images'}'", f"output_dir='{tmp_path}'"])
    with pytest.raises(ProviderError):
        cli.preprocess_corpus(cfg, _FlakyProvider(fail_after=7))
    lines = (tmp_path / cli.PROGRESS).read_text().splitlines()
    assert len(lines) == 7
    again = _FlakyProvider()
    summary = cli.preprocess_corpus(cfg, again)
    assert again.calls == 18 - 7
    assert summary["resumed"] == 7 and summary["new"] == 11
    assert summary["used_detection"] + summary["passthrough"] == summary["total"] == 18
    crops = json.loads((tmp_path / cli.CROP_MANIFEST).read_text())["crops"]
    assert len({c["id"] for c in crops}) == 18
    for c in crops:
        w, h = Image.open(tmp_path / c["output"]).size
        assert w * 4 == h * 3


def test_preprocess_does_not_touch_inputs(corpus, tmp_path):
    before = _tree_bytes(corpus)
    cli.main(["preprocess", *args_for(corpus, tmp_path / "o")])
    assert _tree_bytes(corpus) == before


# ---------------------------------------------------------------- full pipeline


@pytest.fixture(scope="module")
def pipeline(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = args_for(corpus, out)
    codes = {cmd: cli.main([cmd, *args]) for cmd in ("preprocess", "train", "embed", "eval")}
    return out, args, codes


def test_pipeline_end_to_end(pipeline):
    out, _, codes = pipeline
    assert set(codes.values()) == {0}
    for name in ("run.json", "crop_manifest.json", "manifest.json", "checkpoint.dvfc", "train_log.jsonl",
                 "embeddings.dvfe", "eval_report.json"):
        assert (out / name).is_file(), name
    runs = json.loads((out / "run.json").read_text())
    assert set(runs) == {"preprocess", "train", "embed", "eval"}
    assert RunConfig.from_json(runs["train"]["config"]).output_dir == str(out)


def test_eval_table_matches_report(pipeline, capsys):
    out, args, _ = pipeline
    assert cli.main(["eval", *args]) == 0
    table = capsys.readouterr().out
    report = EvalReport.from_json(json.loads((out / "eval_report.json").read_text()))
    row = table.strip().splitlines()[-1].split("|")
    assert row[0].strip() == "DVF"
    assert [float(c) for c in row[1:]] == [report.recall_at[1], report.recall_at[2]]


def test_eval_is_deterministic(pipeline):
    out, args, _ = pipeline
    first = (out / "eval_report.json").read_text()
    cli.main(["eval", *args])
    assert (out / "eval_report.json").read_text() == first


def test_retrieve_excludes_query(pipeline, capsys):
    out, args, _ = pipeline
    store = EmbeddingStore.load(out / "embeddings.dvfe")
    query_id = store.ids[0]
    cls, stem = query_id.split("/")
    path = next((out / "processed" / cls).glob(stem + ".*"))
    assert cli.main(["retrieve", str(path), "--top-k", "3", *args]) == 0
    rows = [l.split("\t") for l in capsys.readouterr().out.strip().splitlines()]
    assert len(rows) == 3 and rows[0][1] != query_id
    assert query_id not in [r[1] for r in rows]


def test_viz_tokens_outputs(pipeline, corpus, capsys):
    out, args, _ = pipeline
    image = sorted((corpus / "images" / "c001_square_vstripes").iterdir())[0]
    assert cli.main(["viz-tokens", str(image), *args]) == 0
    summary = json.loads((out / "viz" / f"{image.stem}_tokens.json").read_text())
    assert len(summary["with_importance"]["ids"]) == 12
    assert (out / "viz" / f"{image.stem}_with_importance.png").is_file()


def test_trained_importance_changes_some_selection(pipeline, corpus):
    out, args, _ = pipeline
    model, _, _ = cli._load_model(load_config(preset="toy", overrides=[f"output_dir='{out}'"]), None)
    differ = 0
    for image in sorted((corpus / "images").rglob("*.png")):
        summary = cli.viz_tokens(None, model, image, out / "viz_all")
        differ += not summary["same_ids"]
    assert differ >= 1


def test_viz_zero_init_importance_and_full_k(corpus, tmp_path):
    from dvf.model import build_model

    cfg = load_config(preset="toy", overrides=TINY + ["model.k=16"])
    model = build_model(cfg.model.to_model(), 0)
    image = sorted((corpus / "images").rglob("*.png"))[0]
    summary = cli.viz_tokens(cfg, model, image, tmp_path)
    assert summary["same_ids"]
    assert sorted(summary["with_importance"]["ids"]) == list(range(16))
    overlay = np.asarray(Image.open(summary["overlays"]["with_importance"]))
    from dvf.dataset import load_rgb, resize_crop

    assert np.array_equal(overlay, np.asarray(resize_crop(load_rgb(image), False, crop_size=64)))


# ---------------------------------------------------------------- ablation


def test_ablate_empty_toggles_single_row(corpus, tmp_path, capsys):
    args = args_for(corpus, tmp_path, "train.epochs=1")
    assert cli.main(["ablate", *args]) == 0
    payload = json.loads((tmp_path / "ablation.json").read_text())
    assert list(payload["rows"]) == ["baseline"]
    assert "baseline" in capsys.readouterr().out


def test_ablate_svf_full_k_equals_baseline(corpus, tmp_path):
    cfg = load_config(preset="toy", overrides=TINY + [
        f"dataset.root='{corpus / 'images'}'", f"output_dir='{tmp_path}'", "model.k=16"])
    rows = cli.ablate(cfg, ["svf"], [0])["rows"]
    assert set(rows) == {"baseline", "baseline + svf"}
    for K in (1, 2):
        assert abs(rows["baseline"][K] - rows["baseline + svf"][K]) <= 1e-3


def test_ablate_k_sweep_rows_and_curve(corpus, tmp_path):
    cfg = load_config(preset="toy", overrides=TINY + [
        f"dataset.root='{corpus / 'images'}'", f"output_dir='{tmp_path}'", "train.epochs=1"])
    rows = cli.ablate(cfg, [], [0], k_sweep=[4, 8, 12, 16])["rows"]
    assert [r for r in rows if r.startswith("k=")] == ["k=4", "k=8", "k=12", "k=16"]
    curve = json.loads((tmp_path / "k_sweep.json").read_text())
    assert curve["k"] == [4, 8, 12, 16] and len(curve["recall_at"]) == 4


def test_ablate_unknown_toggle(tmp_path):
    with pytest.raises(ConfigurationError):
        cli.ablate(load_config(overrides=[f"output_dir='{tmp_path}'"]), ["magic"], [0])
