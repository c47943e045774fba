import sqlite3

import pytest

import suite
from sqlsearch.schema_env import QueryTask, introspect_schema


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    return suite.materialize(tmp_path_factory.mktemp("suite"))


@pytest.fixture(scope="session")
def db_dir(fixture_dir):
    return fixture_dir["db_dir"]


@pytest.fixture(scope="session")
def concert_db(fixture_dir):
    return fixture_dir["concert_singer"]


@pytest.fixture(scope="session")
def concerts_db(fixture_dir):
    return fixture_dir["concerts"]


@pytest.fixture(scope="session")
def one_table_db(fixture_dir):
    return fixture_dir["one_table"]


@pytest.fixture(scope="session")
def concert_schema(concert_db):
    return introspect_schema(concert_db)


@pytest.fixture(scope="session")
def suite_tasks():
    return [QueryTask.from_record(r) for r in suite.task_records()]


@pytest.fixture(scope="session")
def suite_policy():
    return suite.scripted_policy()


@pytest.fixture
def make_db(tmp_path):
    """Create a throwaway database from a DDL/DML script."""
    def _make(script, name="scratch.sqlite"):
        path = tmp_path / name
        conn = sqlite3.connect(path)
        conn.executescript(script)
        conn.commit()
        conn.close()
        return path
    return _make


# acceptance criteria report: one PASS/FAIL line per criterion in the summary
_criteria: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__ != "test_acceptance" or not item.name.startswith("test_criterion"):
        return
    title = (item.function.__doc__ or item.name).strip().splitlines()[0]
    if report.when == "call" or report.failed:
        failed = report.failed or _criteria.get(item.name, (title, False))[1]
        _criteria[item.name] = (title, failed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        title, failed = _criteria[name]
        terminalreporter.write_line(f"{'FAIL' if failed else 'PASS'}  {title}")
