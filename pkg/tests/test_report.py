import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from encvit.attacks import SuiteResult
from encvit.errors import FormatError, RejectedInput
from encvit.report import AA_LABEL, COLUMNS, EvalReport, ReportRow, emit_report, parse_report_csv, row_from_suite


def sample_report():
    rep = EvalReport(meta={"seed": 3, "epsilon": "8/255"})
    rep.add(ReportRow("baseline", 1, "1", 99.0, {"pgd_ce": 0.0, "pgd_t": 0.5, "square": 2.0}, 0.0))
    rep.add(ReportRow("random_ensemble", 4, "3 or 4", 98.5, {"pgd_ce": 97.0, "pgd_t": 96.5, "square": 80.0}, 79.5))
    rep.add(ReportRow("random_ensemble", 4, "3 or 4", 98.5, {"pgd_ce": 40.0}, 40.0, leaked_keys=2))
    return rep


def test_column_order_is_fixed():
    assert COLUMNS == ("model", "N", "S", "leaked_keys", "clean", "pgd_ce", "pgd_t", "square", AA_LABEL)
    assert emit_report(sample_report()).splitlines()[0].decode() == \
        'model,N,S,leaked_keys,clean,pgd_ce,pgd_t,square,AA (FAB-t omitted)'


def test_csv_reparse_equals_rows():
    rep = sample_report()
    rows = parse_report_csv(emit_report(rep))
    assert rows == [r.cells() for r in rep.rows]
    assert rows[2] == ["random_ensemble", "4", "3 or 4", "2", "98.50", "40.00", "", "", "40.00"]


def test_output_is_stable():
    a = emit_report(sample_report(), "csv")
    b = emit_report(sample_report(), "csv")
    assert hashlib.sha256(a).digest() == hashlib.sha256(b).digest()
    assert emit_report(sample_report(), "json") == emit_report(sample_report(), "json")


def test_json_carries_meta_and_deviations():
    doc = json.loads(emit_report(sample_report(), "json"))
    assert doc["meta"]["seed"] == 3
    assert any("FAB-t omitted" in d for d in doc["meta"]["deviations"])
    assert any("APGD" in d for d in doc["meta"]["deviations"])
    assert doc["rows"][0]["model"] == "baseline"


def test_empty_report_rejected():
    with pytest.raises(RejectedInput, match="empty"):
        emit_report(EvalReport())


@pytest.mark.parametrize("row", [
    ReportRow("x", 1, "1", 101.0, {}, 0.0),
    ReportRow("x", 1, "1", 90.0, {"pgd_ce": 50.0}, 60.0),
    ReportRow("x", 1, "1", 90.0, {"fab": 50.0}, 10.0),
    ReportRow("x", 1, "1", float("nan"), {}, 0.0),
])
def test_row_invariants(row):
    with pytest.raises(RejectedInput):
        EvalReport().add(row)


def test_bad_format_and_header():
    with pytest.raises(RejectedInput):
        emit_report(sample_report(), "xml")
    with pytest.raises(FormatError):
        parse_report_csv(b"a,b\n1,2\n")


@settings(max_examples=50, deadline=None)
@given(flags=st.lists(st.tuples(st.booleans(), st.booleans(), st.booleans(), st.booleans()), min_size=1,
                      max_size=40))
def test_suite_rows_satisfy_schema_law(flags):
    f = np.array(flags)
    clean = f[:, 0]
    robust = {"pgd_ce": f[:, 1] & clean, "pgd_t": f[:, 2] & clean, "square": f[:, 3] & clean}
    aa = clean & robust["pgd_ce"] & robust["pgd_t"] & robust["square"]
    row = row_from_suite("m", 4, "3 or 4", SuiteResult(len(f), clean, robust, aa))
    EvalReport().add(row)
    assert row.aa <= min(row.attacks.values())
