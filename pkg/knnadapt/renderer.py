from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

from rich.console import Console
from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from .corpus import Vocabulary
from .decode import StepTrace
from .models import SimilarityReport, SystemScore

console = Console()


def _domains(scores: Sequence[SystemScore]) -> list[str]:
    return list(dict.fromkeys(s.domain for s in scores))


def _systems(scores: Sequence[SystemScore]) -> list[str]:
    return list(dict.fromkeys(s.system for s in scores))


def results_rows(scores: Sequence[SystemScore]) -> tuple[list[str], list[list[str]]]:
    """One row per system, one BLEU column per domain, then the average."""
    domains = _domains(scores)
    by_key = {(s.system, s.domain): s for s in scores}
    header = ["system", *domains, "avg"]
    rows = []
    for system in _systems(scores):
        values = [by_key[(system, d)].bleu for d in domains if (system, d) in by_key]
        cells = [
            f"{by_key[(system, d)].bleu:.2f}" if (system, d) in by_key else "-" for d in domains
        ]
        avg = f"{sum(values) / len(values):.2f}" if values else "-"
        rows.append([system, *cells, avg])
    return header, rows


def render_results(scores: Sequence[SystemScore]) -> None:
    header, rows = results_rows(scores)
    table = Table(title="BLEU by system and domain")
    table.add_column(header[0], style="cyan")
    for name in header[1:-1]:
        table.add_column(name, style="green", justify="right")
    table.add_column(header[-1], style="yellow", justify="right")
    for row in rows:
        table.add_row(*row)
    console.print(table)

    lambdas = [s for s in scores if s.lam is not None]
    if lambdas:
        lam_table = Table(title="Tuned lambda")
        lam_table.add_column("system", style="cyan")
        lam_table.add_column("domain", style="magenta")
        lam_table.add_column("lambda", style="yellow", justify="right")
        for s in lambdas:
            lam_table.add_row(s.system, s.domain, f"{s.lam:.2f}")
        console.print(lam_table)


SIMILARITY_HEADER = ["domain", "mode", "mean_cosine", "mean_sq_euclidean", "n_positions"]


def similarity_rows(reports: Mapping[str, Sequence[SimilarityReport]]) -> list[list[str]]:
    return [
        [domain, r.mode, f"{r.mean_cosine:.4f}", f"{r.mean_sq_euclidean:.4f}", str(r.n_positions)]
        for domain, items in reports.items()
        for r in items
    ]


def render_similarity(reports: Mapping[str, Sequence[SimilarityReport]]) -> None:
    table = Table(title="Synthetic vs ideal representations")
    table.add_column("Domain", style="cyan")
    table.add_column("Mode", style="magenta")
    table.add_column("Cosine", style="green", justify="right")
    table.add_column("Sq. euclidean", style="yellow", justify="right")
    table.add_column("Positions", style="blue", justify="right")
    for row in similarity_rows(reports):
        table.add_row(*row)
    console.print(table)


def render_comparison(rows: Sequence[Mapping[str, str]], limit: int = 10) -> None:
    if not rows:
        console.print("[yellow]Nothing to compare[/yellow]")
        return
    table = Table(title="Translations side by side", show_lines=True)
    for name in rows[0]:
        table.add_column(name, style="cyan" if name == "id" else None)
    for row in rows[:limit]:
        table.add_row(*row.values())
    console.print(table)


def render_recall(recalls: Mapping[int, float], k: int) -> None:
    table = Table(title=f"Recall@{k} against exact search")
    table.add_column("nprobe", style="cyan", justify="right")
    table.add_column("recall", style="green", justify="right")
    for nprobe, recall in recalls.items():
        table.add_row(str(nprobe), f"{recall:.4f}")
    console.print(table)


def render_key_values(title: str, values: Mapping[str, object]) -> None:
    table = Table(title=title, show_header=False, box=None)
    table.add_column(style="cyan")
    table.add_column(style="green")
    for key, value in values.items():
        table.add_row(key, str(value))
    console.print(table)


def render_success(message: str) -> None:
    console.print(
        Panel(Text(message, style="green"), title="✅ Success", border_style="green")
    )


def render_error(message: str) -> None:
    console.print(
        Panel(Text(message, style="red"), title="❌ Error", border_style="red")
    )


def write_tsv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(str(cell) for cell in row) + "\n")
    return path


def trace_lines(traces: Sequence[StepTrace], vocab: Vocabulary) -> list[str]:
    """position, NMT top-5, retrieved (distance, token), interpolated top-5, chosen token."""

    def top(items):
        return " ".join(f"{vocab.detokenize(t)}:{p:.4f}" for t, p in items)

    lines = []
    for step in traces:
        neighbors = " ".join(
            f"{n.distance:.4f}:{vocab.detokenize(n.value)}" for n in step.neighbors
        )
        lines.append(
            "\t".join(
                [
                    str(step.position),
                    top(step.nmt_top),
                    neighbors or "-",
                    top(step.final_top),
                    vocab.detokenize(step.chosen),
                ]
            )
        )
    return lines
