import hashlib
import json

import numpy as np
import pytest

from dualvcr import synth
from dualvcr.document import parse_corpus
from dualvcr.synth import (
    SynthConfig,
    SynthConfigError,
    generate_corpus,
    generate_page,
    load_themes,
    planted_context,
    regenerate,
    theme_pools,
    verify_manifest,
)


def test_single_widget_page():
    cfg = SynthConfig(pages=1, widgets_per_page=1, distractor_groups=0, seed=2)
    doc, img, spec = generate_page(cfg, 11)
    cands = doc.candidates()
    assert [e.id for e in cands] == [spec.action.element_id]
    assert (img.width, img.height) == (cfg.page_width, cfg.page_height)


def test_generation_deterministic(tmp_path):
    cfg = SynthConfig(pages=6, seed=4)
    a = generate_corpus(cfg, tmp_path / "a")
    b = generate_corpus(cfg, tmp_path / "b")
    assert a.manifest == b.manifest
    for name in a.manifest["files"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert generate_corpus(SynthConfig(pages=6, seed=5)).manifest["files"] != a.manifest["files"]


def test_planted_context(small_synth):
    for task in small_synth.train + small_synth.test:
        gt_hit, clean = planted_context(task, 3)
        assert gt_hit, task.task_id
        assert clean >= 0.9, (task.task_id, clean)


def test_split_sizes_and_ids(small_synth):
    assert (len(small_synth.train), len(small_synth.test)) == (8, 2)
    ids = [t.task_id for t in small_synth.train + small_synth.test]
    assert sorted(ids) == [f"synth-{i:04d}" for i in range(10)]


def test_cross_domain_pools_disjoint():
    themes = load_themes()
    train, test = theme_pools(SynthConfig(split_mode="cross-domain", distractor_groups=2), themes)
    assert not {t["name"] for t in train} & {t["name"] for t in test}
    corpus = generate_corpus(SynthConfig(pages=10, seed=3, split_mode="cross-domain", distractor_groups=2))
    assert not {t.domain for t in corpus.train} & {t.domain for t in corpus.test}


def test_manifest_regenerate_and_verify(synth_dir, small_synth):
    manifest = synth_dir / "manifest.json"
    assert verify_manifest(manifest) == []
    again = regenerate(manifest)
    assert again.manifest == small_synth.manifest
    for name, digest in json.loads(manifest.read_text())["files"].items():
        assert hashlib.sha256((synth_dir / name).read_bytes()).hexdigest() == digest
    (synth_dir / "test.jsonl").write_text("{}\n")
    assert verify_manifest(manifest) == ["test.jsonl"]
    regenerate(manifest, synth_dir)
    assert verify_manifest(manifest) == []


def test_written_corpus_loads(synth_dir, small_synth):
    assert parse_corpus(synth_dir / "train.jsonl") == small_synth.train


def test_pages_valid_and_visible(small_synth):
    themes = load_themes()
    bg = np.array(themes["background"])
    for task in small_synth.train + small_synth.test:
        step = task.steps[0]
        doc = step.document
        img = small_synth.images[doc.screenshot]
        px = img.array if hasattr(img, "array") else np.frombuffer(img.pixels, np.uint8).reshape(img.height, img.width, 3)
        gt = doc.get(step.gt_action.element_id)
        assert gt.actionable and gt.visible
        for e in doc.elements:
            b = e.bbox
            assert 0 <= b.x and 0 <= b.y and b.x + b.w <= img.width and b.y + b.h <= img.height
            if e.visible:
                color = px[int(b.y), int(b.x)].astype(int)
                assert np.abs(color - bg).max() >= 32, e.id
        assert doc.get(doc.elements[0].id).parent is None
        assert all(e.parent is not None for e in doc.elements[1:])


def test_keyword_in_instruction(small_synth):
    themes = {t["name"]: t for t in load_themes()["themes"]}
    for task in small_synth.train:
        assert themes[task.domain]["words"][0] in task.instruction


@pytest.mark.parametrize(
    "kw, field",
    [
        ({"pages": 0}, "pages"),
        ({"page_width": 10}, "page_width"),
        ({"distractor_groups": -1}, "distractor_groups"),
        ({"widgets_per_page": 3, "distractor_groups": 2}, "widgets_per_page"),
        ({"M_planted": 0}, "M_planted"),
        ({"cluster_size": 2}, "cluster_size"),
        ({"split_mode": "random"}, "split_mode"),
        ({"test_fraction": 1.0}, "test_fraction"),
        ({"seed": -1}, "seed"),
    ],
)
def test_config_errors(kw, field):
    with pytest.raises(SynthConfigError, match=field):
        SynthConfig(**kw)


def test_unknown_theme_and_small_pool():
    with pytest.raises(SynthConfigError, match="unknown themes"):
        theme_pools(SynthConfig(vocab_themes=("nope",)), load_themes())
    with pytest.raises(SynthConfigError, match="pool"):
        theme_pools(SynthConfig(split_mode="cross-domain", distractor_groups=6), load_themes())


def test_split_is_seeded():
    cfg = SynthConfig(pages=50, seed=8)
    held = synth.test_indices(cfg)
    assert len(held) == 10 and held == synth.test_indices(cfg)
