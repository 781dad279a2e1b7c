import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tangrambench.dataset import (
    DatasetError,
    Mode,
    SceneAnnotation,
    Split,
    SVGParseError,
    UnfittablePolygonError,
    UnsupportedSVGFeature,
    effective_mode,
    export_svg,
    fit_template,
    generate_synthetic,
    import_svg,
    load_annotation,
    make_task,
    mask_from_png,
    merge_fields,
    parse_svg,
    placement_from_dict,
    placement_to_dict,
    render_scene,
    save_annotation,
    target_values,
    write_dataset,
)
from tangrambench.geometry import PieceType, Placement, Polygon, overlap_area, placements_mask, realize
from tangrambench.metrics import angle_error

SVG_HEAD = '<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 10 10">'


def svg(body, head=SVG_HEAD):
    return f"{head}{body}</svg>"


class TestParseSvg:
    def test_single_polygon(self):
        polys, w, h = parse_svg(svg('<polygon points="0,0 4,0 2,2"/>'))
        assert len(polys) == 1 and (w, h) == (10, 10)
        assert sorted(map(tuple, polys[0].vertices.tolist())) == [(0, 0), (2, 2), (4, 0)]

    def test_empty_document(self):
        polys, w, h = parse_svg('<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 20 30"/>')
        assert polys == [] and (w, h) == (20, 30)

    @pytest.mark.parametrize("cmd", ["C 1 1 2 2 3 3", "Q 1 1 2 2", "A 1 1 0 0 1 2 2"])
    def test_curves_are_rejected_by_name(self, cmd):
        with pytest.raises(UnsupportedSVGFeature, match=cmd[0]):
            parse_svg(svg(f'<path d="M 0 0 L 1 0 {cmd} Z"/>'))

    def test_relative_path_commands(self):
        polys, _, _ = parse_svg(svg('<path d="m 1 1 h 2 v 2 h -2 z"/>'))
        assert polys[0].area == pytest.approx(4.0)

    def test_viewbox_origin_is_removed(self):
        doc = '<svg xmlns="http://www.w3.org/2000/svg" viewBox="5 5 10 10"><polygon points="5,5 7,5 7,7"/></svg>'
        polys, _, _ = parse_svg(doc)
        assert polys[0].vertices.min() == pytest.approx(0.0)

    def test_malformed_xml(self):
        with pytest.raises(SVGParseError):
            parse_svg("<svg><polygon")

    def test_transform_rejected(self):
        with pytest.raises(UnsupportedSVGFeature):
            parse_svg(svg('<g transform="rotate(3)"><polygon points="0,0 1,0 0,1"/></g>'))


class TestFit:
    def test_square_roundtrip(self):
        p = Placement("square", (5, 5), 37, 1.4)
        fit = fit_template(realize(p))
        assert fit.piece_type is PieceType.SQUARE
        assert fit.residual <= 1e-6
        assert fit.placement.size == pytest.approx(1.4, rel=1e-9)
        assert np.allclose(fit.placement.pos, (5, 5))
        assert angle_error(fit.placement.angle, 37, "square") <= 1e-6

    def test_parallelogram_flip_recovered(self):
        p = Placement("parallelogram", (4, 6), 123, 1.1, True)
        fit = fit_template(realize(p))
        assert fit.placement.flip is True
        assert angle_error(fit.placement.angle, 123, "parallelogram") <= 1e-6

    def test_equilateral_is_unfittable(self):
        tri = Polygon(np.array([(0, 0), (2, 0), (1, math.sqrt(3))]) + 4)
        with pytest.raises(UnfittablePolygonError):
            fit_template(tri)

    def test_triangle_hint_breaks_similarity(self):
        p = Placement("medium-triangle", (5, 5), 10, 1.0)
        fit = fit_template(realize(p), "large-triangle-1")
        assert fit.piece_type is PieceType.LARGE_TRIANGLE_1
        assert fit.placement.size == pytest.approx(math.sqrt(0.5))

    @given(
        st.sampled_from(list(PieceType)),
        st.floats(3.5, 6.5),
        st.floats(3.5, 6.5),
        st.floats(0, 359.999),
        st.floats(0.6, 1.5),
        st.booleans(),
    )
    def test_import_export_roundtrip(self, t, x, y, angle, size, flip):
        p = Placement(t, (x, y), angle, size, flip and t is PieceType.PARALLELOGRAM)
        scene = SceneAnnotation("s", (p,))
        got = import_svg(export_svg(scene)).pieces[0]
        assert got.piece_type is p.piece_type
        assert np.allclose(got.pos, p.pos, atol=1e-6)
        assert got.size == pytest.approx(p.size, rel=1e-9)
        assert angle_error(got.angle, p.angle, t) <= 1e-6
        assert got.flip == p.flip


class TestRender:
    def test_png_is_deterministic(self):
        a = generate_synthetic(1, seed=9)[0]
        assert render_scene(a, 256) == render_scene(a, 256)

    def test_png_decodes_to_the_same_mask(self):
        a = generate_synthetic(1, "two-piece", seed=4)[0]
        m = mask_from_png(render_scene(a, 256))
        ref = placements_mask(a.pieces, 256)
        assert m == ref
        assert m.popcount() == ref.popcount()


class TestGenerate:
    def test_seeded(self):
        assert generate_synthetic(5, seed=2) == generate_synthetic(5, seed=2)
        assert generate_synthetic(5, seed=2) != generate_synthetic(5, seed=3)

    def test_piece_filter(self):
        scenes = generate_synthetic(50, piece_filter=["medium-triangle"], seed=1)
        assert len(scenes) == 50
        assert all(len(s.pieces) == 1 and s.pieces[0].piece_type is PieceType.MEDIUM_TRIANGLE for s in scenes)

    def test_two_piece_overlap_bound(self):
        for s in generate_synthetic(40, "two-piece", seed=5):
            a, b = s.pieces
            assert overlap_area(a, b) <= 0.02 * min(a.area, b.area) + 1e-12

    def test_values_are_json_precision(self):
        for s in generate_synthetic(10, seed=0):
            p = s.pieces[0]
            assert p.angle == round(p.angle, 6) and p.size == round(p.size, 6)

    def test_invalid_count(self):
        with pytest.raises(DatasetError):
            generate_synthetic(0)


class TestAnnotationIO:
    def test_json_roundtrip(self, tmp_path):
        a = generate_synthetic(1, "two-piece", seed=11)[0]
        save_annotation(a, tmp_path / "a.json")
        assert load_annotation(tmp_path / "a.json") == a
        data = json.loads((tmp_path / "a.json").read_text())
        assert data["split"] == "two-piece" and len(data["pieces"]) == 2

    def test_scale_alias(self):
        d = placement_to_dict(Placement("square", (1, 2), 3, 1.5))
        d["scale"] = d.pop("size")
        assert placement_from_dict(d).size == 1.5

    def test_split_mismatch(self):
        with pytest.raises(DatasetError):
            SceneAnnotation("x", (Placement("square", (5, 5)),), Split.TWO_PIECE)

    def test_write_dataset_layout(self, tmp_path):
        scenes = generate_synthetic(3, seed=0)
        img, gt = write_dataset(scenes, tmp_path, 128)
        assert sorted(p.stem for p in img.glob("*.png")) == sorted(p.stem for p in gt.glob("*.json"))


class TestTasks:
    def test_fixed_and_target_fields(self):
        a = generate_synthetic(1, seed=0)[0]
        task = make_task(a, Mode.POS)
        assert task.target_fields == ("pos",)
        assert set(task.fixed_fields[0]) == {"type", "flip", "angle", "size"}
        assert merge_fields(task, target_values(a, task)) == list(a.pieces)

    def test_merge_rejects_wrong_fields(self):
        a = generate_synthetic(1, seed=0)[0]
        task = make_task(a, Mode.ANGLE)
        with pytest.raises(DatasetError):
            merge_fields(task, [{"pos": (1, 1)}])

    def test_mode_piece_count_mismatch(self):
        a = generate_synthetic(1, seed=0)[0]
        with pytest.raises(DatasetError):
            make_task(a, Mode.TWO_POS)

    @pytest.mark.parametrize("mode,n,expected", [
        ("pos", 2, "two-pos"), ("two-angle", 1, "angle"), ("all", 2, "two-pos-angle"),
        ("size", 2, None), ("two-pos", 2, "two-pos"),
    ])
    def test_effective_mode(self, mode, n, expected):
        got = effective_mode(mode, n)
        assert (got.value if got else None) == expected
