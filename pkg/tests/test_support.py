import numpy as np
import pytest

from capsadapter.clients import StubClients
from capsadapter.errors import ClientError, EmptyClass, EmptyClassname, InvalidCount, NoPrompts
from capsadapter.features import FeatureMatrix, build_onehot, load_cache
from capsadapter.kernels import HyperParams, m_adapter_logits, tipx_logits
from capsadapter.support import (
    build_caption_prompt,
    build_class_prompt,
    build_fewshot_cache,
    build_support_set,
    check_manifest,
    fewshot_caption_cache,
    plan_generation,
    sample_training_images,
)
from conftest import unit_rows

CLASSES = ["arctic_tern", "apple_pie", "dog"]
REFS = [[f"{c}/{i}.jpg" for i in range(6)] for c in CLASSES]


class TestSampling:
    def test_exact_k_keeps_order(self):
        assert sample_training_images([["a", "b", "c"]], 3, seed=1) == [["a", "b", "c"]]

    def test_replacement(self):
        assert sample_training_images([["only"]], 3, seed=1) == [["only"] * 3]

    def test_deterministic(self):
        assert sample_training_images(REFS, 2, 9) == sample_training_images(REFS, 2, 9)

    def test_without_replacement(self):
        out = sample_training_images(REFS, 4, 5)
        for refs, picked in zip(REFS, out):
            assert len(set(picked)) == 4 and picked == sorted(picked, key=refs.index)

    def test_empty_class(self):
        with pytest.raises(EmptyClass):
            sample_training_images([["a"], []], 1, 0)


class TestPrompts:
    def test_class_prompt(self):
        assert build_class_prompt("apple_pie", "food101") == "A photo of apple pie."
        assert build_class_prompt("France", "country211") == "In France."
        with pytest.raises(EmptyClassname):
            build_class_prompt("", "food101")

    def test_caption_prompt(self):
        assert (build_caption_prompt("A photo of arctic tern.", "A white bird flying over the sea.")
                == "A photo of arctic tern. A white bird flying over the sea.")
        assert build_caption_prompt("In France.", "") == "In France."
        assert build_caption_prompt("A photo of dog.", "  a dog  ") == "A photo of dog. a dog"


class TestPlan:
    def test_no_duplication_when_m_le_k(self):
        jobs = plan_generation([f"p{i}" for i in range(5)], 3, base_seed=40)
        assert len(jobs) == 3
        assert all(j.replica == 0 and j.seed == 40 for j in jobs)
        assert len({j.prompt for j in jobs}) == 3

    def test_distinct_seeds_when_m_gt_k(self):
        jobs = plan_generation(["p0", "p1"], 5, base_seed=100)
        pairs = [(j.prompt, j.seed) for j in jobs]
        assert len(set(pairs)) == 5
        seeds = sorted(j.seed for j in jobs if j.prompt == jobs[0].prompt)
        assert seeds == list(range(100, 100 + len(seeds)))
        assert max(j.replica for j in jobs) == 2  # ceil(5 / 2) - 1

    def test_duplicate_prompt_texts_still_unique(self):
        jobs = plan_generation(["same", "same", "other"], 6, base_seed=0)
        pairs = [(j.prompt, j.seed) for j in jobs]
        assert len(set(pairs)) == 6

    def test_errors(self):
        with pytest.raises(NoPrompts):
            plan_generation([], 3, 0)
        with pytest.raises(InvalidCount):
            plan_generation(["p"], 0, 0)


class TestBuildSupportSet:
    def build(self, tmp_path=None, **kw):
        args = dict(k=2, m=5, base_seed=17, dataset="toy", workers=4)
        args.update(kw)
        return build_support_set(CLASSES, REFS, StubClients(), out_dir=tmp_path, **args)

    def test_counts(self):
        s = self.build()
        assert len(s.manifest["records"]) == 15
        assert s.f_img.shape == (15, 16) and s.f_cap.shape == (15, 16)
        assert s.labels.data.shape == (15, 3)
        assert check_manifest(s.manifest) == []

    def test_row_alignment(self):
        s = self.build()
        stub = StubClients()
        from capsadapter.clients import EncodeRequest
        for j, rec in enumerate(s.manifest["records"]):
            assert s.labels.classes[j] == rec["class_index"]
            img = stub.encode(EncodeRequest("image", [rec["image_ref"]])).rows[0]
            cap = stub.encode(EncodeRequest("text", [rec["prompt"]], 77)).rows[0]
            np.testing.assert_allclose(s.f_img.data[j], img, atol=1e-6)
            np.testing.assert_allclose(s.f_cap.data[j], cap, atol=1e-6)

    def test_prefix_and_caption_source(self):
        s = self.build()
        for rec in s.manifest["records"]:
            cls_prompt = s.manifest["class_prompts"][rec["class_index"]]
            assert rec["prompt"] == build_caption_prompt(cls_prompt, rec["caption"])
            assert rec["source_image"].startswith(CLASSES[rec["class_index"]])

    def test_byte_identical_reruns(self, tmp_path):
        self.build(tmp_path / "a")
        self.build(tmp_path / "b", workers=1)
        for name in ("manifest.json", "img.caps", "cap.caps", "labels.json", "img.meta.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_max_tokens_reaches_encoder(self):
        a, b = self.build(max_tokens=77), self.build(max_tokens=20)
        assert not np.array_equal(a.f_cap.data, b.f_cap.data)
        np.testing.assert_array_equal(a.f_img.data, b.f_img.data)

    def test_caption_failure_names_image(self):
        class Broken(StubClients):
            def caption(self, req):
                if req.image_ref.startswith("dog"):
                    raise ClientError("boom")
                return super().caption(req)

        with pytest.raises(ClientError, match="dog/"):
            build_support_set(CLASSES, REFS, Broken(), k=2, m=3, base_seed=0, workers=2)

    def test_persisted_caches(self, tmp_path):
        s = self.build(tmp_path)
        assert load_cache(tmp_path / "img.caps").equals(s.f_img)
        assert load_cache(tmp_path / "cap.caps").normalized


class TestFewShot:
    def data(self, rng):
        classes = np.array([1, 0, 2, 1, 0, 2, 2, 1])
        return FeatureMatrix(unit_rows(rng, 8, 6), normalized=True), classes

    def test_one_shot(self, rng):
        feats, classes = self.data(rng)
        cache, labels = build_fewshot_cache(feats, classes, 1, seed=0)
        assert cache.rows == 3
        assert labels.classes.tolist() == [0, 1, 2]
        for row, c in zip(cache.data, labels.classes):
            assert any(np.array_equal(row, feats.data[i]) for i in np.flatnonzero(classes == c))

    def test_replacement_when_small(self, rng):
        feats, classes = self.data(rng)
        cache, labels = build_fewshot_cache(feats, classes, 4, seed=0)
        assert cache.rows == 12 and labels.class_counts().tolist() == [4, 4, 4]

    def test_deterministic(self, rng):
        feats, classes = self.data(rng)
        a, _ = build_fewshot_cache(feats, classes, 2, seed=3)
        b, _ = build_fewshot_cache(feats, classes, 2, seed=3)
        assert a.equals(b)

    def test_empty_class(self, rng):
        feats, _ = self.data(rng)
        with pytest.raises(EmptyClass):
            build_fewshot_cache(feats, [0] * 8, 1, seed=0, n_classes=2)

    def test_caption_cache_reduces_to_tipx(self, rng):
        feats, classes = self.data(rng)
        w = FeatureMatrix(unit_rows(rng, 3, 6), normalized=True)
        img, labels = build_fewshot_cache(feats, classes, 2, seed=0)
        cap = fewshot_caption_cache(w, labels)
        np.testing.assert_array_equal(cap.data, w.data[[0, 0, 1, 1, 2, 2]])
        f = unit_rows(rng, 5, 6)
        hp = HyperParams(1.0, 5.0, 1.0, 0.0)
        np.testing.assert_array_equal(m_adapter_logits(f, w, img, cap, labels, hp), tipx_logits(f, w, img, labels, hp))
