"""
Tests for the table rows, TSV writers and decoding traces.
"""

from knnadapt.corpus import build_vocabulary
from knnadapt.decode import StepTrace
from knnadapt.ivf import Neighbor
from knnadapt.models import SimilarityReport, SystemScore
from knnadapt.renderer import (
    SIMILARITY_HEADER,
    results_rows,
    similarity_rows,
    trace_lines,
    write_tsv,
)


class TestResultsRows:
    """The BLEU grid."""

    def test_grid_with_average(self):
        """Systems in first-seen order, domains as columns and a trailing average."""
        scores = [
            SystemScore(system="basic", domain="medical", bleu=10.0),
            SystemScore(system="basic", domain="law", bleu=20.0),
            SystemScore(system="uda", domain="medical", bleu=15.5, lam=0.5),
            SystemScore(system="uda", domain="law", bleu=25.5, lam=0.25),
        ]
        header, rows = results_rows(scores)
        assert header == ["system", "medical", "law", "avg"]
        assert rows == [
            ["basic", "10.00", "20.00", "15.00"],
            ["uda", "15.50", "25.50", "20.50"],
        ]

    def test_missing_cell(self):
        """A system without a score on a domain shows a dash and averages the rest."""
        scores = [
            SystemScore(system="basic", domain="medical", bleu=10.0),
            SystemScore(system="basic", domain="law", bleu=30.0),
            SystemScore(system="copy", domain="law", bleu=12.0, lam=0.0),
        ]
        _, rows = results_rows(scores)
        assert rows[1] == ["copy", "-", "12.00", "12.00"]

    def test_empty(self):
        """No scores give only the fixed columns."""
        assert results_rows([]) == (["system", "avg"], [])


class TestSimilarityRows:
    """Similarity report rows."""

    def test_rows(self):
        """One row per domain and mode with four decimals."""
        reports = {
            "medical": [
                SimilarityReport(mode="copy", mean_cosine=0.5, mean_sq_euclidean=2.0, n_positions=7),
                SimilarityReport(
                    mode="copy+adapters", mean_cosine=0.91234, mean_sq_euclidean=0.1, n_positions=7
                ),
            ]
        }
        rows = similarity_rows(reports)
        assert len(SIMILARITY_HEADER) == len(rows[0])
        assert rows == [
            ["medical", "copy", "0.5000", "2.0000", "7"],
            ["medical", "copy+adapters", "0.9123", "0.1000", "7"],
        ]


class TestWriters:
    """Plain-text report files."""

    def test_write_tsv(self, tmp_path):
        """Header then rows, creating parent directories."""
        path = write_tsv(tmp_path / "a" / "b.tsv", ["x", "y"], [[1, "p"], [2.5, "q"]])
        assert path.read_text() == "x\ty\n1\tp\n2.5\tq\n"


class TestTraceLines:
    """Per-step trace formatting."""

    def test_fields(self):
        """Five tab-separated fields with tokens rendered through the vocabulary."""
        vocab = build_vocabulary([["a b"]])
        a, b = vocab.lookup("a"), vocab.lookup("b")
        step = StepTrace(
            position=0,
            nmt_top=[(a, 0.75), (b, 0.25)],
            neighbors=[Neighbor(3, 1.5, b)],
            final_top=[(b, 0.6), (a, 0.4)],
            chosen=b,
        )
        assert trace_lines([step], vocab) == [
            "0\ta:0.7500 b:0.2500\t1.5000:b\tb:0.6000 a:0.4000\tb"
        ]

    def test_no_neighbors(self):
        """Steps without retrieval show a dash."""
        vocab = build_vocabulary([["a"]])
        a = vocab.lookup("a")
        step = StepTrace(position=2, nmt_top=[(a, 1.0)], neighbors=[], final_top=[(a, 1.0)], chosen=a)
        assert trace_lines([step], vocab)[0].split("\t")[2] == "-"
