import sqlite3

import pytest

FIXTURE_DDL = """
CREATE TABLE singer (singer_id INTEGER PRIMARY KEY, name TEXT, country TEXT, age INTEGER, net_worth REAL);
CREATE TABLE concert (concert_id INTEGER PRIMARY KEY, concert_name TEXT, stadium_id INTEGER, year INTEGER);
CREATE TABLE stadium (stadium_id INTEGER PRIMARY KEY, name TEXT, capacity INTEGER, location TEXT);
INSERT INTO singer VALUES (1, 'Joe', 'France', 52, 30.0), (2, 'Ana', 'Spain', 29, 12.5), (3, 'Li', 'France', 41, 0.1);
INSERT INTO concert VALUES (1, 'Spring', 1, 2014), (2, 'Summer', 2, 2015), (3, 'Autumn', 1, 2015), (4, 'Winter', 3, 2016);
INSERT INTO stadium VALUES (1, 'Arena', 5000, 'Paris'), (2, 'Dome', 12000, 'Madrid'), (3, 'Bowl', 800, 'Lyon');
"""


@pytest.fixture(scope="session")
def fixture_db(tmp_path_factory):
    """Three-table concert database; singer has 3 rows, 2 of them from France."""
    path = tmp_path_factory.mktemp("db") / "concert.sqlite"
    con = sqlite3.connect(path)
    con.executescript(FIXTURE_DDL)
    con.commit()
    con.close()
    return path


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory):
    from routesql.cli import init_demo

    root = tmp_path_factory.mktemp("demo")
    init_demo(root)
    return root
