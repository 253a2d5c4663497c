"""Regenerate the shipped synthetic twin-records fixture."""
from pathlib import Path

from sd2.datagen import write_twins_fixture

if __name__ == "__main__":
    out = Path(__file__).resolve().parent.parent / "src" / "sd2" / "data" / "twins_fixture.csv"
    write_twins_fixture(out)
    print(f"wrote {out}")
