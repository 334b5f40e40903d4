from slide_mil.core import Label
from slide_mil.metrics import roc_auc
from slide_mil.plots import roc_svg


def test_svg_is_deterministic_and_escaped():
    curve, auc = roc_auc([0.9, 0.8, 0.4, 0.3], [Label.EGFR_POS, Label.EGFR_NEG, Label.EGFR_POS, Label.EGFR_NEG])
    a = roc_svg([("A<B", curve, auc), ("ext", curve, auc)], title="x & y")
    assert a == roc_svg([("A<B", curve, auc), ("ext", curve, auc)], title="x & y")
    assert "A&lt;B (AUC 0.750)" in a and "x &amp; y" in a
    assert a.count('stroke-width="2"') == 2
    assert a.startswith("<svg") and a.endswith("</svg>\n")
