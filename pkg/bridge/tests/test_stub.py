"""Behavioral tests for the deterministic stub expert."""

from __future__ import annotations

import threading

import pytest

from maskarbiter import decode_rle, rle_from_json
from maskarbiter.synth import CLASS_VOCABULARY
from maskbridge import BridgeConfig, BridgeError, RequestProblem, StubExpert


def point_req(image: str, x: int, y: int, k: int = 3, rid: str = "r") -> dict:
    return {"id": rid, "image": image, "kind": "point", "point": [x, y], "k": k}


def text_req(image: str, text: str, rid: str = "r") -> dict:
    return {"id": rid, "image": image, "kind": "text", "text": text}


class TestDeterminism:
    def test_same_request_same_answer_across_instances(self) -> None:
        a = StubExpert()
        b = StubExpert()
        for req in [point_req("scan-07", 20, 31), text_req("scan-07", "bolt")]:
            assert a.answer(req) == b.answer(req)

    def test_different_images_differ(self) -> None:
        expert = StubExpert()
        one = expert.answer(text_req("img-a", "bolt"))
        other = expert.answer(text_req("img-b", "bolt"))
        assert one["masks"] != other["masks"]

    def test_threaded_answers_match_serial(self) -> None:
        serial = StubExpert()
        expected = [serial.answer(point_req(f"img-{i}", 10 + i, 12, k=2)) for i in range(16)]
        shared = StubExpert()
        got: list[dict | None] = [None] * 16

        def work(i: int) -> None:
            got[i] = shared.answer(point_req(f"img-{i}", 10 + i, 12, k=2))

        threads = [threading.Thread(target=work, args=(i,)) for i in range(16)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert got == expected


class TestPoint:
    def test_k_masks_and_confidences(self) -> None:
        expert = StubExpert()
        for k in (1, 2, 3, 5, 8):
            resp = expert.answer(point_req("img", 32, 32, k=k))
            assert len(resp["masks"]) == k
            assert len(resp["confidences"]) == k
            assert all(0.0 <= c <= 1.0 for c in resp["confidences"])
            for payload in resp["masks"]:
                m = decode_rle(rle_from_json(payload))
                assert (m.width, m.height) == (64, 64)

    def test_object_under_point_is_a_candidate(self) -> None:
        expert = StubExpert()
        footprint = expert.answer(text_req("img", "bolt"))["masks"][0]
        arr = decode_rle(rle_from_json(footprint)).to_array()
        ys, xs = arr.nonzero()
        resp = expert.answer(point_req("img", int(xs[0]), int(ys[0]), k=len(CLASS_VOCABULARY)))
        assert footprint in resp["masks"]

    def test_rejects_bad_points(self) -> None:
        expert = StubExpert()
        for bad in ([1], [1, 2, 3], [-1, 2], [1.5, 2], "x", None):
            with pytest.raises(RequestProblem):
                expert.answer({"id": "r", "image": "i", "kind": "point", "point": bad, "k": 1})

    def test_rejects_bad_k(self) -> None:
        expert = StubExpert()
        for bad in (0, -3, "3", True, 10_000):
            with pytest.raises(RequestProblem):
                expert.answer({"id": "r", "image": "i", "kind": "point", "point": [1, 1], "k": bad})


class TestText:
    def test_known_class_returns_single_mask(self) -> None:
        expert = StubExpert()
        resp = expert.answer(text_req("img", "hinge"))
        assert len(resp["masks"]) == 1
        assert resp["confidences"] == [1.0]

    def test_unknown_text_hashes_into_vocabulary(self) -> None:
        expert = StubExpert()
        resp = expert.answer(text_req("img", "the shiny thing on the left"))
        known = {tuple(m["counts"]) for m in (expert.answer(text_req("img", c))["masks"][0] for c in CLASS_VOCABULARY)}
        assert tuple(resp["masks"][0]["counts"]) in known
        again = expert.answer(text_req("img", "the shiny thing on the left"))
        assert resp == again

    def test_rejects_empty_text(self) -> None:
        expert = StubExpert()
        with pytest.raises(RequestProblem):
            expert.answer(text_req("img", "   "))


class TestConfigAndCache:
    def test_cache_is_bounded(self) -> None:
        expert = StubExpert(BridgeConfig(cache_size=2))
        for i in range(5):
            expert.answer(text_req(f"img-{i}", "bolt"))
        assert len(expert._scenes) <= 2

    def test_cached_scene_is_reused(self) -> None:
        expert = StubExpert()
        expert.answer(text_req("img", "bolt"))
        scene = expert._scenes["img"]
        expert.answer(point_req("img", 5, 5))
        assert expert._scenes["img"] is scene  # one encoding shared by both kinds

    def test_stub_rejects_checkpoints(self) -> None:
        with pytest.raises(BridgeError):
            BridgeConfig(mode="stub", sam_checkpoint="weights.pth")

    def test_unknown_mode_rejected(self) -> None:
        with pytest.raises(BridgeError):
            BridgeConfig(mode="magic")

    def test_custom_canvas(self) -> None:
        expert = StubExpert(BridgeConfig(width=96, height=48))
        resp = expert.answer(text_req("img", "bolt"))
        m = decode_rle(rle_from_json(resp["masks"][0]))
        assert (m.width, m.height) == (96, 48)


class TestSamEvfGuard:
    def test_missing_dependencies_fail_loudly(self) -> None:
        from maskbridge.cli import build_expert
        from maskbridge.config import BridgeDependencyError

        config = BridgeConfig(mode="sam_evf", sam_checkpoint="a.pth", evf_checkpoint="b.pth")
        with pytest.raises(BridgeDependencyError):
            build_expert(config)

    def test_missing_checkpoints_fail_loudly(self) -> None:
        from maskbridge.cli import build_expert
        from maskbridge.config import BridgeDependencyError

        with pytest.raises(BridgeDependencyError, match="checkpoint"):
            build_expert(BridgeConfig(mode="sam_evf"))
