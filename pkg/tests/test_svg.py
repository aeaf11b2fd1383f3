"""Rendering rules for the chart writer."""

import math
import xml.dom.minidom

from quaff.svg import bar_chart, line_chart


def parse(path):
    return xml.dom.minidom.parse(str(path))


def test_line_chart_is_valid_standalone_svg(tmp_path):
    p = tmp_path / "c.svg"
    line_chart(p, "t", "x", "y", [("a", [0, 1, 2], [1.0, 2.0, 1.5])])
    doc = parse(p)
    assert doc.documentElement.tagName == "svg"
    text = p.read_text()
    assert "<script" not in text and "href" not in text  # self-contained


def test_gap_splits_series_into_segments(tmp_path):
    p = tmp_path / "c.svg"
    line_chart(
        p, "t", "x", "y",
        [("a", [0, 1, 2, 3, 4], [1.0, 2.0, None, 3.0, 4.0])],
    )
    assert p.read_text().count("<polyline") == 2


def test_nan_also_breaks_the_line(tmp_path):
    p = tmp_path / "c.svg"
    line_chart(p, "t", "x", "y", [("a", [0, 1, 2], [1.0, math.nan, 2.0])])
    # two stranded points render as dots, not a bridged line
    text = p.read_text()
    assert text.count("<polyline") == 0
    assert text.count("<circle") == 2


def test_band_renders_polygon(tmp_path):
    p = tmp_path / "c.svg"
    xs = [0, 1, 2]
    line_chart(
        p, "t", "x", "y",
        [("a", xs, [1.0, 2.0, 1.5])],
        bands=[("a", xs, [0.8, 1.7, 1.2], [1.2, 2.3, 1.8])],
    )
    assert "<polygon" in p.read_text()


def test_zero_width_band_still_renders(tmp_path):
    p = tmp_path / "c.svg"
    xs = [0, 1]
    ys = [1.0, 1.0]
    line_chart(p, "t", "x", "y", [("a", xs, ys)], bands=[("a", xs, ys, ys)])
    parse(p)  # degenerate envelope must not break the document


def test_empty_series_produces_valid_file(tmp_path):
    p = tmp_path / "c.svg"
    line_chart(p, "empty", "x", "y", [])
    parse(p)


def test_labels_are_escaped(tmp_path):
    p = tmp_path / "c.svg"
    line_chart(p, "a < b & c", "x", "y", [("s<1>", [0, 1], [0.0, 1.0])])
    parse(p)
    assert "a &lt; b &amp; c" in p.read_text()


def test_bar_chart_panels(tmp_path):
    p = tmp_path / "b.svg"
    bar_chart(
        p,
        [
            ("storage", "bytes", ["fp32", "quaff"], [4096.0, 1234.0]),
            ("latency", "ms", ["fp32", "quaff"], [0.5, 1.5]),
        ],
    )
    doc = parse(p)
    text = p.read_text()
    assert text.count("<rect") >= 5  # background + 4 bars
    assert "storage" in text and "latency" in text
    assert doc.documentElement.getAttribute("height") == "600"
