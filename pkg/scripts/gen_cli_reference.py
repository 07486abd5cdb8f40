"""Regenerate docs/CLI.md from the argument parser."""
from pathlib import Path

from cowqkd.cli import reference_markdown

if __name__ == "__main__":
    out = Path(__file__).resolve().parent.parent / "docs" / "CLI.md"
    out.write_text(reference_markdown())
    print(f"wrote {out}")
