# Copyright (C) 2026 The clora-compose Authors
# SPDX-License-Identifier: Apache-2.0

import json
import math

import numpy as np
import pytest

import clora


def woman_umbrella():
    spec = clora.CompositionSpec()
    spec.base_prompt = "a woman with an umbrella"
    spec.bindings = [clora.ConceptBinding("woman", "L1"), clora.ConceptBinding("umbrella", "L2")]
    return spec


def test_version():
    assert clora.__version__ == "0.1.0"


def test_groups():
    spec = woman_umbrella()
    variants = clora.build_variants(spec, clora.WordTokenizer())
    assert [v.text for v in variants] == [
        "a woman with an umbrella",
        "a L1 woman with an umbrella",
        "a woman with an L2 umbrella",
    ]
    groups = clora.build_groups(variants, spec)
    assert [tuple(m) for m in groups[0].members] == [(0, 2), (1, 2), (1, 3), (2, 2)]
    assert [tuple(m) for m in groups[1].members] == [(0, 5), (1, 6), (2, 5), (2, 6)]


def test_infonce_closed_form_and_grad():
    a = np.array([1.0, 0.0, 0.0])
    n = np.array([0.0, 1.0, 0.0])
    loss = clora.infonce_loss([[a, a], [n]], 0.5)
    assert loss == pytest.approx(-math.log(math.exp(2) / (math.exp(2) + 1)), abs=1e-12)
    loss2, grads = clora.infonce_loss_with_grad([[a, a + n], [n]], 0.5)
    assert len(grads) == 2 and grads[0][0].shape == (3,)
    assert loss2 > 0
    assert clora.cosine_sim(np.array([1.0, 2, 2]), np.array([2.0, 1, 2])) == pytest.approx(8 / 9)


def test_errors_carry_kind():
    with pytest.raises(clora.CloraError) as info:
        clora.cosine_sim(np.zeros(2), np.ones(2))
    assert info.value.kind == clora.ErrorKind.ZeroVector


def test_masks():
    m = clora.binary_mask(np.array([[1.0, 0.4], [0.6, 0.2]]), 0.5)
    assert m.tolist() == [[1, 0], [1, 0]]
    up = clora.upsample_mask(m, 4, 4)
    assert up.shape == (4, 4) and up[:2, :2].all() and not up[:, 2:].any()


def test_apply_delta_hand_example():
    d = clora.LoRALayerDelta("w", up=np.array([[1.0], [0.0]]), down=np.array([[0.0, 1.0]]))
    assert clora.apply_delta(np.eye(2), d).tolist() == [[1, 1], [0, 1]]


def test_guidance_helpers():
    assert clora.alpha_schedule(25, 50, 20.0) == 10.0
    z = clora.latent_update(np.array([[1.0]]), np.array([[0.5]]), 0.2)
    assert z[0, 0] == pytest.approx(0.9)


def test_generate_replay_and_ablation():
    backend = clora.ToyBackend()
    cfg = clora.ComposeConfig.from_json(json.dumps({
        "prompt": "a cat and a dog",
        "concepts": [{"text": "cat", "lora": "L1"}, {"text": "dog", "lora": "L2"}],
        "seed": 3,
        "guidance": {"cutoff": 5, "refine_steps": [0]},
    }))
    run = clora.generate(cfg, backend, steps=10)
    assert run.image.to_array().shape == (16, 16)
    assert len(run.losses) == 10 and len(run.losses[0]) == 5
    meta = json.loads(run.metadata)
    assert meta["method"] == "clora" and len(meta["groups"]) == 2
    assert clora.replay(run.metadata, backend).image == run.image

    cfg.spec.guidance.enabled = False
    cfg.spec.mask.enabled = False
    a = clora.generate(cfg, backend, steps=10)
    b = clora.generate(cfg, backend, method=clora.Method.Composite, steps=10)
    assert np.array_equal(a.final_latent, b.final_latent)


class HandExtractor(clora.FeatureExtractor):
    def name(self):
        return "hand"

    def features(self, image):
        c = image.to_array()[0, 0] / 10.0
        return np.array([1.0, 0.0]) if c > 1 else np.array([c, math.sqrt(1 - c * c)])


def test_python_extractor_report():
    def img(v):
        return clora.Image(np.full((2, 2), v, dtype=np.uint8))

    report = clora.evaluate(img(255), {"A": [img(2)], "B": [img(8)]}, HandExtractor())
    assert report.min_sim == pytest.approx(0.2, abs=1e-15)
    assert report.avg_sim == pytest.approx(0.5, abs=1e-15)
    assert report.max_sim == pytest.approx(0.8, abs=1e-15)
    exact = clora.make_report({"A": 0.2, "B": 0.8})
    assert (exact.min_sim, exact.avg_sim, exact.max_sim) == (0.2, 0.5, 0.8)


def test_benchmark_with_python_extractor(tmp_path):
    manifest = json.dumps({
        "methods": ["clora", "composite"],
        "steps": 6,
        "guidance": {"cutoff": 3, "refine_steps": [0]},
        "entries": [{"prompt": "a cat and a dog", "concepts": ["cat", "dog"], "loras": ["L1", "L2"]}],
    })
    backend = clora.ToyBackend()
    table = clora.run_benchmark(manifest, tmp_path, backend, clora.ToyExtractor())
    assert table.splitlines()[0] == "metric,clora,composite"
    assert (tmp_path / "table.csv").read_text() == table


def test_dino_unavailable_is_reported():
    from clora.dino import DinoExtractor

    try:
        DinoExtractor()
    except clora.CloraError as e:
        assert e.kind == clora.ErrorKind.ExtractorUnavailable
