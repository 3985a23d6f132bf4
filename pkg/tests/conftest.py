import numpy as np
import pytest

from dualvcr.document import Action, BBox, Element, HtmlDocument, Operation, OpType, build_task
from dualvcr.synth import SynthConfig, generate_corpus

# filled by test_acceptance; printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def el(id, tag="div", text="", x=0.0, y=0.0, w=0.0, h=0.0, visible=True, actionable=False, parent=None, attrs=()):
    return Element(id, tag, text, tuple(attrs), BBox(float(x), float(y), float(w), float(h)), visible, actionable, parent)


def random_document(rng: np.random.Generator, n: int, grid: int | None = None) -> HtmlDocument:
    """Random boxes; ``grid`` snaps coordinates to force distance ties."""
    elements = []
    for i in range(n):
        if grid:
            x, y = rng.integers(0, grid, 2).astype(float) * 10
            w, h = 0.0, 0.0
        else:
            x, y = rng.uniform(-50, 500, 2)
            w, h = rng.uniform(0, 60, 2)
        elements.append(el(f"n{i}", x=x, y=y, w=w, h=h, visible=bool(rng.random() > 0.15), actionable=True))
    if not any(e.visible for e in elements):
        elements[0] = el("n0", actionable=True)
    return HtmlDocument(tuple(elements))


@pytest.fixture
def fig_page():
    """The pickup-time page: a bare combobox disambiguated only by its neighbor label."""
    doc = HtmlDocument(
        (
            el("root", "body", w=400, h=200, visible=False),
            el("lbl1", "button", "Pick-up Mar22", 10, 10, 80, 20, parent="root"),
            el("cb1", "combobox", "", 10, 40, 80, 20, actionable=True, parent="root"),
            el("lbl2", "button", "Return Mar25", 300, 10, 80, 20, parent="root"),
            el("cb2", "combobox", "", 300, 40, 80, 20, actionable=True, parent="root"),
            el("to", "textbox", "To", 150, 150, 80, 20, actionable=True, parent="root", attrs=(("name", "dest"),)),
        )
    )
    return build_task(
        "fig",
        "book a car with pick-up time 11:30 am",
        "cars.example",
        "travel",
        [(doc, Action("cb1", Operation(OpType.SELECT, "11:30 am")))],
    )


@pytest.fixture(scope="session")
def small_synth():
    return generate_corpus(SynthConfig(pages=10, seed=3))


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate_corpus(SynthConfig(pages=10, seed=3), out)
    return out
