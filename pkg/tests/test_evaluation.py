"""Unit tests for manifest loading, evaluation runs, sweeps, and reports."""

from __future__ import annotations

import json
import os
import sys

import numpy as np
import pytest

from maskarbiter import (
    AllInstancesFailed,
    EvalReport,
    ExecBackend,
    ExpertBackends,
    FileBackend,
    FusionWeights,
    InstanceRecord,
    InvalidConfig,
    MalformedManifest,
    Mask,
    MissingClassName,
    PointPrompt,
    TextPrompt,
    decode_rle,
    emit_report,
    encode_rle,
    eval_instance,
    format_percent,
    load_manifest,
    report_from_json_dict,
    report_to_csv,
    report_to_json,
    report_to_json_dict,
    report_to_markdown,
    rle_to_json,
    run_eval,
    run_prompt_sweep,
)
from maskarbiter.synth import gen_suite

REPLAY_SCRIPT = os.path.join(os.path.dirname(__file__), "replay_expert.py")


def square(side: int, size: int = 8) -> Mask:
    arr = np.zeros((size, size), dtype=bool)
    arr[:side, :side] = True
    return Mask.from_array(arr)


def write_perfect_fixture(tmp_path, n: int = 3):
    """Manifest + backend where one candidate and the guide equal gt."""
    gts = [square(s + 2) for s in range(n)]
    instances = []
    responses = []
    for i, gt in enumerate(gts):
        instances.append(
            {
                "id": f"case-{i}",
                "image": f"img-{i}",
                "point": [0, 0],
                "text": "thing",
                "class": "thing",
                "gt": rle_to_json(encode_rle(gt)),
            }
        )
        responses.append(
            {
                "image": f"img-{i}",
                "kind": "point",
                "point": [0, 0],
                "masks": [
                    rle_to_json(encode_rle(gt)),
                    rle_to_json(encode_rle(square(7))),
                    rle_to_json(encode_rle(square(8))),
                ],
                "confidences": [0.9, 0.8, 0.7],
            }
        )
        responses.append(
            {
                "image": f"img-{i}",
                "kind": "text",
                "text": "thing",
                "masks": [rle_to_json(encode_rle(gt))],
                "confidences": [0.75],
            }
        )
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"instances": instances}))
    backend = tmp_path / "backend.json"
    backend.write_text(json.dumps({"responses": responses}))
    return manifest, backend


class TestLoadManifest:
    def test_empty_list(self, tmp_path) -> None:
        path = tmp_path / "m.json"
        path.write_text('{"instances": []}')
        assert load_manifest(path) == []

    def test_records_in_file_order(self, tmp_path) -> None:
        manifest, _ = write_perfect_fixture(tmp_path)
        records = load_manifest(manifest)
        assert [r.id for r in records] == ["case-0", "case-1", "case-2"]
        assert records[0].class_name == "thing"

    def test_duplicate_id_rejected(self, tmp_path) -> None:
        gt = rle_to_json(encode_rle(square(2)))
        payload = {
            "instances": [
                {"id": "x", "image": "i", "point": [0, 0], "text": "t", "gt": gt},
                {"id": "x", "image": "i", "point": [0, 0], "text": "t", "gt": gt},
            ]
        }
        path = tmp_path / "m.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(MalformedManifest, match="duplicate"):
            load_manifest(path)

    def test_point_outside_gt_rejected(self, tmp_path) -> None:
        payload = {
            "instances": [
                {
                    "id": "x",
                    "image": "i",
                    "point": [8, 0],
                    "text": "t",
                    "gt": rle_to_json(encode_rle(square(2))),
                }
            ]
        }
        path = tmp_path / "m.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(MalformedManifest, match="outside"):
            load_manifest(path)

    def test_gt_from_pbm_path(self, tmp_path) -> None:
        from maskarbiter import save_mask

        gt = square(3)
        save_mask(gt, tmp_path / "gt.pbm")
        payload = {
            "instances": [
                {
                    "id": "x",
                    "image": "i",
                    "point": [0, 0],
                    "text": "t",
                    "gt": {"path": "gt.pbm"},
                }
            ]
        }
        path = tmp_path / "m.json"
        path.write_text(json.dumps(payload))
        records = load_manifest(path)
        assert decode_rle(records[0].gt) == gt

    def test_diagnostics_name_the_field(self, tmp_path) -> None:
        path = tmp_path / "m.json"
        path.write_text('{"instances": [{"id": "x", "image": "i"}]}')
        with pytest.raises(MalformedManifest, match="point"):
            load_manifest(path)

    def test_not_json(self, tmp_path) -> None:
        path = tmp_path / "m.json"
        path.write_text("{broken")
        with pytest.raises(MalformedManifest):
            load_manifest(path)


class TestEvalInstance:
    def test_perfect_experts_give_unit_iou(self, tmp_path) -> None:
        manifest, backend = write_perfect_fixture(tmp_path)
        records = load_manifest(manifest)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        results = eval_instance(records[0], backends)
        by_variant = {r.variant: r for r in results}
        assert by_variant["dual"].iou == 1.0
        assert by_variant["dual"].dice == 1.0
        assert by_variant["dual"].chosen_index == 0
        assert by_variant["point_only"].iou == 1.0
        assert by_variant["text_only"].iou == 1.0

    def test_fallback_recorded_when_guide_disjoint(self, tmp_path) -> None:
        gt = square(2)
        far = np.zeros((8, 8), dtype=bool)
        far[6:, 6:] = True
        payload = {
            "responses": [
                {
                    "image": "i",
                    "kind": "point",
                    "point": [0, 0],
                    "masks": [rle_to_json(encode_rle(gt))],
                    "confidences": [0.9],
                },
                {
                    "image": "i",
                    "kind": "text",
                    "text": "t",
                    "masks": [rle_to_json(encode_rle(Mask.from_array(far)))],
                },
            ]
        }
        backend_path = tmp_path / "b.json"
        backend_path.write_text(json.dumps(payload))
        rec = InstanceRecord(
            id="x",
            image_ref="i",
            point=PointPrompt(0, 0),
            text=TextPrompt("t"),
            gt=encode_rle(gt),
        )
        backends = ExpertBackends(FileBackend(backend_path), FileBackend(backend_path))
        results = eval_instance(rec, backends, variants=["dual"], k=1)
        assert results[0].fallback_used == "point_confidence"
        assert results[0].iou == 1.0

    def test_backend_error_carries_instance_id(self, tmp_path) -> None:
        backend_path = tmp_path / "b.json"
        backend_path.write_text('{"responses": []}')
        rec = InstanceRecord(
            id="lost-case",
            image_ref="i",
            point=PointPrompt(0, 0),
            text=TextPrompt("t"),
            gt=encode_rle(square(2)),
        )
        backends = ExpertBackends(FileBackend(backend_path), FileBackend(backend_path))
        from maskarbiter import BackendUnavailable

        with pytest.raises(BackendUnavailable, match="lost-case"):
            eval_instance(rec, backends)

    def test_matches_scalar_pipeline_replay(self, tmp_path) -> None:
        # Replay the whole dual pipeline with plain loops on the generated
        # suite and compare against eval_instance on the same files.
        paths = gen_suite(42, 8, 0.5, tmp_path)
        records = load_manifest(paths["manifest"])
        rec = records[0]
        backend_payload = json.loads(open(paths["backend"]).read())
        point_entry = next(
            e
            for e in backend_payload["responses"]
            if e["kind"] == "point" and e["image"] == rec.image_ref
        )
        text_entry = next(
            e
            for e in backend_payload["responses"]
            if e["kind"] == "text"
            and e["image"] == rec.image_ref
            and e["text"] == rec.text.text
        )
        from maskarbiter import RleMask

        def to_array(obj):
            r = RleMask(obj["size"][0], obj["size"][1], obj["counts"])
            return decode_rle(r).to_array()

        cand_arrays = [to_array(m) for m in point_entry["masks"]]
        guide_array = to_array(text_entry["masks"][0])
        gt_array = decode_rle(rec.gt).to_array()

        def loop_iou(a, b):
            inter = un = 0
            for y in range(a.shape[0]):
                for x in range(a.shape[1]):
                    if a[y, x] and b[y, x]:
                        inter += 1
                    if a[y, x] or b[y, x]:
                        un += 1
            return 1.0 if un == 0 else inter / un

        sims = [loop_iou(guide_array, c) for c in cand_arrays]
        best = sims.index(max(sims))
        expected_iou = loop_iou(cand_arrays[best], gt_array)

        backends = ExpertBackends(FileBackend(paths["backend"]), FileBackend(paths["backend"]))
        results = eval_instance(rec, backends, variants=["dual"])
        assert results[0].chosen_index == best
        assert results[0].iou == expected_iou
        assert results[0].similarity == tuple(sims)


class TestRunEval:
    def test_all_perfect_means_one(self, tmp_path) -> None:
        manifest, backend = write_perfect_fixture(tmp_path)
        records = load_manifest(manifest)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        report = run_eval(records, backends, backend_label="file")
        for variant in ("dual", "point_only", "text_only"):
            agg = report.aggregates[variant]
            assert agg.mdice == 1.0 and agg.miou == 1.0 and agg.count == 3

    def test_single_instance_mean_is_instance_value(self, tmp_path) -> None:
        manifest, backend = write_perfect_fixture(tmp_path, n=1)
        records = load_manifest(manifest)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        report = run_eval(records, backends)
        result = [r for r in report.results if r.variant == "dual"][0]
        assert report.aggregates["dual"].miou == result.iou

    def test_failures_excluded_and_counted(self, tmp_path) -> None:
        manifest, backend = write_perfect_fixture(tmp_path)
        payload = json.loads(backend.read_text())
        # Drop every response for img-1 so case-1 fails.
        payload["responses"] = [e for e in payload["responses"] if e["image"] != "img-1"]
        backend.write_text(json.dumps(payload))
        records = load_manifest(manifest)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        report = run_eval(records, backends)
        assert report.total_instances == 3
        assert len(report.failures) == 1
        assert report.failures[0].id == "case-1"
        assert report.aggregates["dual"].count == 2
        assert {r.id for r in report.results} == {"case-0", "case-2"}

    def test_all_failed_raises(self, tmp_path) -> None:
        manifest, backend = write_perfect_fixture(tmp_path)
        backend.write_text('{"responses": []}')
        records = load_manifest(manifest)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        with pytest.raises(AllInstancesFailed):
            run_eval(records, backends)

    def test_empty_manifest_gives_empty_report(self, tmp_path) -> None:
        _, backend = write_perfect_fixture(tmp_path)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        report = run_eval([], backends)
        assert report.total_instances == 0
        assert report.aggregates["dual"].count == 0
        assert report.aggregates["dual"].miou is None

    def test_mean_matches_naive_summation(self, tmp_path) -> None:
        paths = gen_suite(5, 16, 0.5, tmp_path)
        records = load_manifest(paths["manifest"])
        backends = ExpertBackends(FileBackend(paths["backend"]), FileBackend(paths["backend"]))
        report = run_eval(records, backends)
        for variant in ("dual", "point_only", "text_only"):
            values = [r.iou for r in report.results if r.variant == variant]
            total = 0.0
            for v in values:
                total += v
            assert abs(report.aggregates[variant].miou - total / len(values)) <= 1e-12

    def test_parallelism_does_not_change_bytes(self, tmp_path) -> None:
        paths = gen_suite(9, 12, 0.5, tmp_path)
        records = load_manifest(paths["manifest"])
        backends = ExpertBackends(FileBackend(paths["backend"]), FileBackend(paths["backend"]))
        serial = run_eval(records, backends, parallelism=1, backend_label="file")
        threaded = run_eval(records, backends, parallelism=8, backend_label="file")
        assert report_to_json(serial) == report_to_json(threaded)

    def test_on_result_called_per_instance(self, tmp_path) -> None:
        manifest, backend = write_perfect_fixture(tmp_path)
        records = load_manifest(manifest)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        seen: list[tuple[str, str | None]] = []
        run_eval(records, backends, on_result=lambda rid, err: seen.append((rid, err)))
        assert sorted(rid for rid, _ in seen) == ["case-0", "case-1", "case-2"]
        assert all(err is None for _, err in seen)

    def test_variant_subset(self, tmp_path) -> None:
        manifest, backend = write_perfect_fixture(tmp_path)
        records = load_manifest(manifest)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        report = run_eval(records, backends, variants=["dual"])
        assert set(report.aggregates) == {"dual"}
        assert all(r.variant == "dual" for r in report.results)

    def test_unknown_variant_rejected(self, tmp_path) -> None:
        manifest, backend = write_perfect_fixture(tmp_path)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        with pytest.raises(InvalidConfig):
            run_eval(load_manifest(manifest), backends, variants=["both"])

    def test_per_class_aggregates(self, tmp_path) -> None:
        paths = gen_suite(13, 6, 0.5, tmp_path)
        records = load_manifest(paths["manifest"])
        backends = ExpertBackends(FileBackend(paths["backend"]), FileBackend(paths["backend"]))
        report = run_eval(records, backends, include_per_class=True)
        assert report.per_class is not None
        assert set(report.per_class) == {r.class_name for r in records}
        assert list(report.per_class) == sorted(report.per_class)
        total = sum(agg["dual"].count for agg in report.per_class.values())
        assert total == report.aggregates["dual"].count


class TestBackendSubstitution:
    def test_exec_replay_matches_file_backend(self, tmp_path) -> None:
        paths = gen_suite(21, 6, 0.5, tmp_path)
        records = load_manifest(paths["manifest"])
        file_backends = ExpertBackends(
            FileBackend(paths["backend"]), FileBackend(paths["backend"])
        )
        file_report = run_eval(
            records, file_backends, parallelism=4, backend_label="suite"
        )
        exec_spec = f"{sys.executable} {REPLAY_SCRIPT} {paths['backend']}"
        exec_backend = ExecBackend(exec_spec, timeout=30.0)
        exec_backends = ExpertBackends(exec_backend, exec_backend)
        try:
            exec_report = run_eval(
                records, exec_backends, parallelism=4, backend_label="suite"
            )
        finally:
            exec_backend.close()
        assert report_to_json(file_report) == report_to_json(exec_report)


class TestPromptSweep:
    def test_two_templates_two_reports(self, tmp_path) -> None:
        paths = gen_suite(31, 6, 0.5, tmp_path)
        records = load_manifest(paths["manifest"])
        backends = ExpertBackends(FileBackend(paths["backend"]), FileBackend(paths["backend"]))
        reports = run_prompt_sweep(records, backends, ["{class}", "object"])
        assert len(reports) == 2
        ids = [sorted({r.id for r in rep.results} | {f.id for f in rep.failures}) for rep in reports]
        assert ids[0] == ids[1]
        assert reports[0].config.prompt_template == "{class}"
        assert reports[1].config.prompt_template == "object"

    def test_class_template_beats_constant(self, tmp_path) -> None:
        paths = gen_suite(42, 12, 0.5, tmp_path)
        records = load_manifest(paths["manifest"])
        backends = ExpertBackends(FileBackend(paths["backend"]), FileBackend(paths["backend"]))
        by_class, constant = run_prompt_sweep(
            records, backends, ["{class}", "object"], variants=["dual"]
        )
        assert by_class.aggregates["dual"].miou > constant.aggregates["dual"].miou

    def test_missing_class_name(self, tmp_path) -> None:
        _, backend = write_perfect_fixture(tmp_path)
        rec = InstanceRecord(
            id="x",
            image_ref="img-0",
            point=PointPrompt(0, 0),
            text=TextPrompt("thing"),
            gt=encode_rle(square(2)),
            class_name=None,
        )
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        with pytest.raises(MissingClassName):
            run_prompt_sweep([rec], backends, ["{class}"])

    def test_empty_templates_rejected(self, tmp_path) -> None:
        _, backend = write_perfect_fixture(tmp_path)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        with pytest.raises(InvalidConfig):
            run_prompt_sweep([], backends, [])


class TestReports:
    def test_percent_rule(self) -> None:
        assert format_percent(0.814623) == "81.46%"
        assert format_percent(0.8955) == "89.55%"
        assert format_percent(1.0) == "100.00%"

    def test_json_round_trip(self, tmp_path) -> None:
        paths = gen_suite(17, 5, 0.4, tmp_path)
        records = load_manifest(paths["manifest"])
        backends = ExpertBackends(FileBackend(paths["backend"]), FileBackend(paths["backend"]))
        report = run_eval(records, backends, backend_label="file", include_per_class=True)
        out = tmp_path / "report.json"
        emit_report(report, out, "json")
        loaded = report_from_json_dict(json.loads(out.read_text()))
        assert loaded == report
        assert report_to_json(loaded) == report_to_json(report)

    def test_markdown_table(self, tmp_path) -> None:
        manifest, backend = write_perfect_fixture(tmp_path, n=2)
        records = load_manifest(manifest)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        report = run_eval(records, backends, variants=["dual"])
        md = report_to_markdown(report)
        lines = md.strip().splitlines()
        assert lines[0] == "| variant | mDice | mIoU | instances |"
        assert lines[2] == "| dual | 100.00% | 100.00% | 2 |"

    def test_markdown_header_only_for_empty_variants(self, tmp_path) -> None:
        _, backend = write_perfect_fixture(tmp_path)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        report = run_eval([], backends, variants=[])
        md = report_to_markdown(report)
        assert md.strip().splitlines() == [
            "| variant | mDice | mIoU | instances |",
            "| --- | --- | --- | --- |",
        ]

    def test_csv_rows(self, tmp_path) -> None:
        manifest, backend = write_perfect_fixture(tmp_path, n=1)
        records = load_manifest(manifest)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        report = run_eval(records, backends)
        rows = report_to_csv(report).strip().splitlines()
        assert rows[0] == "id,variant,dice,iou,chosen_index,fallback"
        assert len(rows) == 4  # three variants for one instance
        assert rows[1].startswith("case-0,dual,1.0,1.0,0,")
        assert rows[3].split(",")[4] == ""  # text_only has no chosen index

    def test_unknown_format(self, tmp_path) -> None:
        _, backend = write_perfect_fixture(tmp_path)
        backends = ExpertBackends(FileBackend(backend), FileBackend(backend))
        report = run_eval([], backends, variants=[])
        with pytest.raises(InvalidConfig):
            emit_report(report, tmp_path / "x", "yaml")
