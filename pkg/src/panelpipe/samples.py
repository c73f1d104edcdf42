"""Bundled sample tables patterned on 1923 Michigan registration reports.

Two renderings of the same page: a clean extraction with one transcription
slip (Cheboygan commercial cars reads 178 where the scan prints 158), and a
layout-mangled one of the kind legacy OCR produces, where disjointed rows
orphan county labels and adjacent cells merge into values like "900 234".
Tests and the synthetic corpus generator both build on these.
"""

from __future__ import annotations

MICHIGAN_HEADER = ["COUNTIES", "Passenger Cars", "Commercial Cars", "Motor Cycles", "Trailers"]

# county -> (passenger, commercial, motorcycles, trailers); None is a blank cell.
MICHIGAN_EXTRACTED = {
    "Alcona": (733, 39, 3, 2),
    "Alger": (1121, 108, 10, 4),
    "Allegan": (7631, 909, 32, 48),
    "Alpena": (2671, 234, 8, 27),
    "Antrim": (1575, 95, 7, 16),
    "Arenac": (1175, 105, None, 1),
    "Baraga": (697, 59, 1, None),
    "Barry": (4493, 372, 14, 31),
    "Bay": (9085, 1044, 33, 32),
    "Benzie": (1014, 150, 1, 5),
    "Berrien": (12847, 2308, 74, 57),
    "Branch": (5389, 424, 10, 48),
    "Calhoun": (15483, 1366, 139, 82),
    "Cass": (3776, 334, 10, 12),
    "Charlevoix": (2587, 242, 15, 4),
    "Cheboygan": (1565, 178, 3, 4),
    "Chippewa": (2341, 217, 9, 7),
    "Clare": (934, 82, 4, 7),
    "Clinton": (5165, 470, 10, 82),
    "Crawford": (660, 58, None, 12),
}

# The scan's true values: identical except the Cheboygan commercial count.
MICHIGAN_TRUTH = dict(MICHIGAN_EXTRACTED)
MICHIGAN_TRUTH["Cheboygan"] = (1565, 158, 3, 4)


def _render(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if c is None else str(c) for c in row))
    return "\n".join(lines) + "\n"


def michigan_csv(values=None, comma_grouped: bool = False) -> str:
    """The clean extraction as CSV text, optionally with comma grouping."""
    values = values if values is not None else MICHIGAN_EXTRACTED
    rows = []
    for county, cells in values.items():
        rendered = []
        for c in cells:
            if c is None:
                rendered.append(None)
            elif comma_grouped and c >= 1000:
                rendered.append(f'"{c:,d}"')
            else:
                rendered.append(str(c))
        rows.append([county] + rendered)
    return _render(MICHIGAN_HEADER, rows)


# Layout-mangled rendering: the first data row loses its county label, which
# shifts every later value against its county; neighbouring cells fuse in all
# four value columns ("909 234" style), and some counties end up blank.
MICHIGAN_BASELINE_CSV = "\n".join([
    "COUNTIES.,Passenger Cars.,Commer- cial Cars.,Motor Cycles.,Trailers.",
    ",,39,3,2",
    "Alcona,733,108,10,4",
    "Alger,1121,,32,48",
    "Allegan,7631,909 234,8,27",
    "Alpena,2671 1575,95,5,16",
    "Antrim,,105,,1",
    "Arenac,1175,45,1,",
    "Baraga,697,372,14,31",
    "Barry,4493,1044,48 32,",
    "Bay,9085 1014,150,1,5",
    "Benzie,,,,",
    ",,2308,74,57",
    "Berricn,12847,424,16,48",
    "Branch,5389,1366,139,82",
    "Calhoun,15483,354,10,12",
    "Cass,3776,242,15,4",
    "Charlevoix,2387,,,",
    ",,158,3,4",
    "Cheboygan,1565,217,9,7",
    "Chippewa,2341,82,4,7",
    "Clare,934,470,10,82",
    "Clinton,5165 660,58,,12 7",
    "Crawford,,,,",
]) + "\n"
