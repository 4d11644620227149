"""Static receptive-field composition and gridding-coverage analysis.

Works on ordered layer descriptions (kernel, dilation, stride) without
touching weights: the per-layer input span is k + (k-1)(D-1) and spans
compose through the running stride product (the "jump").  Coverage
counts which positions inside the receptive-field window actually reach
the output unit; stacked equal dilations leave checkerboard holes,
increasing schedules such as 1, 2, 4 fill the window densely.
"""

from __future__ import annotations

from typing import NamedTuple

from .errors import DomainError, UnsupportedConfigurationError


def effective_kernel(k: int, dilation: int) -> int:
    """Input span of one dilated kernel: k + (k-1)(D-1)."""
    if k < 1 or dilation < 1:
        raise DomainError(f"kernel and dilation must be >= 1, got "
                          f"k={k}, D={dilation}")
    return k + (k - 1) * (dilation - 1)


class RFRow(NamedTuple):
    label: str
    kernel: int
    dilation: int
    stride: int
    effective: int
    rf: int
    jump: int


class RFReport:
    """Receptive-field table; one row per layer, cumulative RF and jump.

    ``coverage`` holds (contributing, window) position counts in 2D when
    every stride is 1, else None (subsampled paths have no single full-
    resolution coverage figure).
    """

    def __init__(self, rows, coverage=None):
        self.rows = list(rows)
        self.coverage = coverage

    @property
    def rf(self) -> int:
        return self.rows[-1].rf

    @property
    def jump(self) -> int:
        return self.rows[-1].jump

    @property
    def density(self):
        if self.coverage is None:
            return None
        contributing, window = self.coverage
        return contributing / window

    def table(self) -> str:
        header = ("layer", "k", "D", "s", "eff", "RF", "jump")
        cells = [header] + [
            (r.label, str(r.kernel), str(r.dilation), str(r.stride),
             str(r.effective), str(r.rf), str(r.jump))
            for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(7)]
        lines = []
        for row in cells:
            lines.append("  ".join(
                cell.ljust(w) if i == 0 else cell.rjust(w)
                for i, (cell, w) in enumerate(zip(row, widths))))
        return "\n".join(lines)


def _normalize(layer_list):
    items = []
    for i, item in enumerate(layer_list):
        entry = tuple(item)
        if len(entry) == 3:
            label = f"layer{i + 1}"
            k, d, s = entry
        elif len(entry) == 4:
            label, k, d, s = entry
        else:
            raise DomainError(f"layer {i}: expected (k, D, s) or "
                              f"(label, k, D, s), got {item!r}")
        items.append((str(label), int(k), int(d), int(s)))
    if not items:
        raise DomainError("need at least one layer")
    return items


def compose_rf(layer_list) -> RFReport:
    """Fold per-layer spans into cumulative receptive fields.

    RF_l = RF_{l-1} + (k_l - 1) * D_l * jump_{l-1} starting from RF = 1,
    jump multiplying by each stride.  Layers are (k, D, s) triples or
    (label, k, D, s) when a name is wanted in the table.
    """
    items = _normalize(layer_list)
    rows = []
    rf, jump = 1, 1
    for label, k, d, s in items:
        eff = effective_kernel(k, d)
        if s < 1:
            raise DomainError(f"{label}: stride must be >= 1, got {s}")
        rf = rf + (k - 1) * d * jump
        jump *= s
        rows.append(RFRow(label, k, d, s, eff, rf, jump))
    coverage = None
    if all(s == 1 for _, _, _, s in items):
        coverage = gridding_coverage(items)
    return RFReport(rows, coverage)


def gridding_coverage(layer_list):
    """(contributing, window) position counts in 2D for a stride-1 stack.

    Accumulates the set of reachable tap-offset sums along one axis;
    squaring the 1D counts gives the separable 2D figures.
    """
    items = _normalize(layer_list)
    for label, k, d, s in items:
        effective_kernel(k, d)
        if s != 1:
            raise UnsupportedConfigurationError(
                f"{label}: coverage is defined at full resolution only "
                f"(stride {s} found)")
    offsets = {0}
    for _, k, d, _ in items:
        offsets = {o + u * d for o in offsets for u in range(k)}
    window_1d = max(offsets) - min(offsets) + 1
    return len(offsets) ** 2, window_1d ** 2


_SCOPES = ("encoder", "bridge", "full")

_SCOPE_NOTES = {
    "encoder": "encoder blocks and downsampling layers only",
    "bridge": "encoder path plus the two main bridge convs "
              "(residual pair excluded)",
    "full": "encoder path plus all bridge convs including the residual pair",
}


def accounting_note(scope: str) -> str:
    """Human-readable statement of which layers enter the RF figure."""
    if scope not in _SCOPES:
        raise DomainError(f"unknown scope {scope!r}; expected one of "
                          + ", ".join(_SCOPES))
    return _SCOPE_NOTES[scope]


def network_rf(spec, scope: str = "bridge") -> RFReport:
    """Receptive field of a configuration's input-to-bridge path.

    ``scope`` fixes the layer accounting: "encoder" stops before the
    bridge, "bridge" (the default, used for headline figures) adds the
    two main bridge convs, "full" also counts the residual block.
    """
    if scope not in _SCOPES:
        raise DomainError(f"unknown scope {scope!r}; expected one of "
                          + ", ".join(_SCOPES))
    keep = {"encoder"}
    if scope in ("bridge", "full"):
        keep.add("bridge")
    if scope == "full":
        keep.add("residual")
    rows = [(label, k, d, s) for label, k, d, s, seg in spec.rf_path()
            if seg in keep]
    return compose_rf(rows)


def network_rf_summary(spec) -> dict:
    """RF of every accounting scope, keyed by scope name."""
    return {scope: network_rf(spec, scope).rf for scope in _SCOPES}
