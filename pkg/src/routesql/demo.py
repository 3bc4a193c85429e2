"""Bundled mini-corpus: three small databases, 20 questions each, and a rule-following responder.

The responder plays every LLM role deterministically. It is only used to
record a scripted fixture table once (``routesql init-demo``); runs then
replay that table through :class:`~routesql.llmgate.ScriptedBackend`.
"""
from __future__ import annotations

import json
import re
import sqlite3
from dataclasses import dataclass
from pathlib import Path

from .llmgate import LlmRequest


@dataclass(frozen=True)
class Flaw:
    pred_sql: str
    category: str
    detail: str
    guideline: str
    fixable: bool


@dataclass(frozen=True)
class Item:
    question: str
    gold_sql: str
    flaw: Flaw | None = None


DDL = {
    "library": """
        CREATE TABLE authors (author_id INTEGER PRIMARY KEY, name TEXT, country TEXT);
        CREATE TABLE books (book_id INTEGER PRIMARY KEY, title TEXT, author_id INTEGER REFERENCES authors(author_id),
                            year INTEGER, price REAL);
        CREATE TABLE loans (loan_id INTEGER PRIMARY KEY, book_id INTEGER REFERENCES books(book_id),
                            member TEXT, days INTEGER);
        INSERT INTO authors VALUES (1,'Margaret Atwood','Canada'),(2,'Victor Hugo','France'),
            (3,'Albert Camus','France'),(4,'Toni Morrison','USA');
        INSERT INTO books VALUES (1,'The Handmaid''s Tale',1,1985,15.5),(2,'Oryx and Crake',1,2003,18.0),
            (3,'Les Miserables',2,1862,12.25),(4,'The Stranger',3,1942,9.99),(5,'Beloved',4,1987,14.0),
            (6,'A Mercy',4,2008,22.5),(7,'The Testaments',1,2019,28.0);
        INSERT INTO loans VALUES (1,1,'alice',7),(2,2,'bob',14),(3,3,'alice',21),(4,5,'carol',3),
            (5,1,'dave',12),(6,4,'bob',5),(7,2,'carol',9),(8,5,'alice',2);
    """,
    "clinic": """
        CREATE TABLE doctors (doctor_id INTEGER PRIMARY KEY, name TEXT, specialty TEXT);
        CREATE TABLE patients (patient_id INTEGER PRIMARY KEY, name TEXT, age INTEGER, city TEXT);
        CREATE TABLE visits (visit_id INTEGER PRIMARY KEY, doctor_id INTEGER REFERENCES doctors(doctor_id),
                             patient_id INTEGER REFERENCES patients(patient_id), cost REAL);
        INSERT INTO doctors VALUES (1,'Ada Grey','Cardiology'),(2,'Ben Hart','Pediatrics'),
            (3,'Cleo Park','Cardiology'),(4,'Dan Roe','Dermatology');
        INSERT INTO patients VALUES (1,'Eva',72,'Boston'),(2,'Finn',25,'Denver'),(3,'Gus',64,'Boston'),
            (4,'Hana',8,'Austin'),(5,'Ivan',45,'Denver'),(6,'Jade',31,'Austin'),(7,'Kim',90,'Seattle');
        INSERT INTO visits VALUES (1,1,1,250.0),(2,2,4,80.5),(3,1,3,120.0),(4,3,1,300.75),(5,4,6,60.0),
            (6,2,2,95.0),(7,1,5,110.25);
    """,
    "airline": """
        CREATE TABLE airports (code TEXT PRIMARY KEY, name TEXT, city TEXT);
        CREATE TABLE flights (flight_id INTEGER PRIMARY KEY, origin TEXT REFERENCES airports(code),
                              dest TEXT REFERENCES airports(code), distance INTEGER);
        CREATE TABLE passengers (passenger_id INTEGER PRIMARY KEY, name TEXT,
                                 flight_id INTEGER REFERENCES flights(flight_id), fare REAL);
        INSERT INTO airports VALUES ('ORD','O''Hare International','Chicago'),('MDW','Midway','Chicago'),
            ('JFK','John F Kennedy','New York'),('SFO','San Francisco International','San Francisco'),
            ('DEN','Denver International','Denver');
        INSERT INTO flights VALUES (1,'ORD','JFK',740),(2,'ORD','SFO',1846),(3,'JFK','SFO',2586),
            (4,'DEN','ORD',888),(5,'SFO','DEN',967),(6,'MDW','DEN',900);
        INSERT INTO passengers VALUES (1,'Lena',2,420.0),(2,'Marco',1,180.5),(3,'Nia',3,610.0),
            (4,'Omar',2,395.25),(5,'Pia',4,150.0),(6,'Quinn',3,575.0),(7,'Rosa',5,210.0);
    """,
}

RULES = {
    "library": [
        ("author_information", "people who wrote books and their countries", ["author", "writer", "written"]),
        ("book_catalog", "book titles, publication years and prices", ["book", "title", "published", "price"]),
        ("lending_activity", "loans of books to members", ["loan", "borrow", "member"]),
    ],
    "clinic": [
        ("medical_staff", "doctors and their specialties", ["doctor", "specialt", "cardiolog"]),
        ("patient_records", "patients, ages and home cities", ["patient", "youngest", "older", "younger"]),
        ("visit_billing", "visits and what they cost", ["visit", "cost"]),
    ],
    "airline": [
        ("airport_network", "airports and the cities they serve", ["airport", "origin", "cities"]),
        ("flight_schedule", "flights, routes and distances", ["flight", "distance", "miles", "destination"]),
        ("passenger_bookings", "passengers and fares", ["passenger", "fare"]),
    ],
}

_MISSING_FILTER = "Keep every restriction stated in the question as a WHERE condition."
_ORDER = "Match the sort direction to the question: ascending unless it asks for highest or latest first."
_JOIN = "Join the table that holds the attribute the question filters on instead of guessing from one table."
_COMPARE = "Check the comparison operator against the wording (older than means greater than)."
_NAMES = "Return the descriptive name column, joining the referenced table, rather than a raw id."
_GROUP = "Add GROUP BY for per-item counts so each group gets its own row."
_SUBQUERY = "Express 'never' or 'no' questions with NOT IN over the related table."

ITEMS: dict[str, list[Item]] = {
    "library": [
        Item("How many authors are there?", "SELECT count(*) FROM authors"),
        Item("List the names of all authors.", "SELECT name FROM authors"),
        Item("What are the titles of books published after 2000?", "SELECT title FROM books WHERE year > 2000",
             Flaw("SELECT title FROM books", "filter_condition", "the year > 2000 filter is missing", _MISSING_FILTER, True)),
        Item("Show the title and price of every book.", "SELECT title, price FROM books"),
        Item("Which authors come from France?", "SELECT name FROM authors WHERE country = 'France'"),
        Item("What is the average book price?", "SELECT avg(price) FROM books"),
        Item("List book titles ordered by year.", "SELECT title FROM books ORDER BY year",
             Flaw("SELECT title FROM books ORDER BY year DESC", "ordering_limit", "sorted descending instead of ascending", _ORDER, True)),
        Item("How many loans did each member make?", "SELECT member, count(*) FROM loans GROUP BY member"),
        Item("What is the most expensive book title?", "SELECT title FROM books ORDER BY price DESC LIMIT 1"),
        Item("Show titles of books written by authors from Canada.",
             "SELECT T1.title FROM books AS T1 JOIN authors AS T2 ON T1.author_id = T2.author_id WHERE T2.country = 'Canada'",
             Flaw("SELECT title FROM books", "missing_join", "authors must be joined to filter on country", _JOIN, False)),
        Item("How many books has each author written?",
             "SELECT T2.name, count(*) FROM books AS T1 JOIN authors AS T2 ON T1.author_id = T2.author_id GROUP BY T2.name"),
        Item("Which members borrowed a book for more than 10 days?", "SELECT DISTINCT member FROM loans WHERE days > 10"),
        Item("What is the total number of loan days?", "SELECT sum(days) FROM loans"),
        Item("List the countries of authors without duplicates.", "SELECT DISTINCT country FROM authors"),
        Item("What is the title of the oldest book?", "SELECT title FROM books ORDER BY year LIMIT 1"),
        Item("Which books were never loaned?", "SELECT title FROM books WHERE book_id NOT IN (SELECT book_id FROM loans)"),
        Item("What is the maximum price of books published before 1990?", "SELECT max(price) FROM books WHERE year < 1990"),
        Item("Show the member names and loan days for loans longer than 5 days.", "SELECT member, days FROM loans WHERE days > 5"),
        Item("How many authors are from each country?", "SELECT country, count(*) FROM authors GROUP BY country"),
        Item("List titles of books with a price between 10 and 20.", "SELECT title FROM books WHERE price BETWEEN 10 AND 20"),
    ],
    "clinic": [
        Item("How many doctors are there?", "SELECT count(*) FROM doctors"),
        Item("List the names of all patients.", "SELECT name FROM patients"),
        Item("What specialties do the doctors have?", "SELECT DISTINCT specialty FROM doctors"),
        Item("Which patients are older than 60?", "SELECT name FROM patients WHERE age > 60",
             Flaw("SELECT name FROM patients WHERE age < 60", "filter_condition", "age comparison is reversed", _COMPARE, True)),
        Item("What is the average visit cost?", "SELECT avg(cost) FROM visits"),
        Item("How many patients live in each city?", "SELECT city, count(*) FROM patients GROUP BY city"),
        Item("Show the names of patients from Boston.", "SELECT name FROM patients WHERE city = 'Boston'"),
        Item("What is the total cost of all visits?", "SELECT sum(cost) FROM visits"),
        Item("List doctor names ordered alphabetically.", "SELECT name FROM doctors ORDER BY name"),
        Item("Who is the youngest patient?", "SELECT name FROM patients ORDER BY age LIMIT 1"),
        Item("How many visits did each doctor have?",
             "SELECT T2.name, count(*) FROM visits AS T1 JOIN doctors AS T2 ON T1.doctor_id = T2.doctor_id GROUP BY T2.name",
             Flaw("SELECT doctor_id, count(*) FROM visits GROUP BY doctor_id", "wrong_column",
                  "returns doctor ids where names are expected", _NAMES, True)),
        Item("Which doctors are cardiologists?", "SELECT name FROM doctors WHERE specialty = 'Cardiology'"),
        Item("What is the highest visit cost?", "SELECT max(cost) FROM visits"),
        Item("List the names of patients who visited a doctor.",
             "SELECT DISTINCT T2.name FROM visits AS T1 JOIN patients AS T2 ON T1.patient_id = T2.patient_id"),
        Item("Which patients never had a visit?", "SELECT name FROM patients WHERE patient_id NOT IN (SELECT patient_id FROM visits)",
             Flaw("SELECT name FROM patients", "filter_condition", "patients with visits are not excluded", _SUBQUERY, False)),
        Item("What is the average age of patients?", "SELECT avg(age) FROM patients"),
        Item("Show visit costs above 100.", "SELECT cost FROM visits WHERE cost > 100"),
        Item("How many patients are younger than 30?", "SELECT count(*) FROM patients WHERE age < 30"),
        Item("Which cities have more than one patient?", "SELECT city FROM patients GROUP BY city HAVING count(*) > 1"),
        Item("List the doctor names and specialties.", "SELECT name, specialty FROM doctors"),
    ],
    "airline": [
        Item("How many airports are there?", "SELECT count(*) FROM airports"),
        Item("List all airport names.", "SELECT name FROM airports"),
        Item("Which flights are longer than 1000 miles?", "SELECT flight_id FROM flights WHERE distance > 1000"),
        Item("What is the average flight distance?", "SELECT avg(distance) FROM flights"),
        Item("Show the names of passengers.", "SELECT name FROM passengers"),
        Item("What is the total fare paid by passengers?", "SELECT sum(fare) FROM passengers"),
        Item("How many flights depart from each origin airport?", "SELECT origin, count(*) FROM flights GROUP BY origin",
             Flaw("SELECT origin, count(*) FROM flights", "grouping", "counts are not grouped by origin", _GROUP, True)),
        Item("Which airports are located in Chicago?", "SELECT name FROM airports WHERE city = 'Chicago'"),
        Item("What is the longest flight distance?", "SELECT max(distance) FROM flights"),
        Item("List passenger names ordered by fare from highest to lowest.", "SELECT name FROM passengers ORDER BY fare DESC"),
        Item("Which passengers paid more than 300 for a fare?", "SELECT name FROM passengers WHERE fare > 300"),
        Item("Show the destination of flight 2.", "SELECT dest FROM flights WHERE flight_id = 2"),
        Item("How many passengers are on each flight?", "SELECT flight_id, count(*) FROM passengers GROUP BY flight_id"),
        Item("List the cities served by airports without duplicates.", "SELECT DISTINCT city FROM airports"),
        Item("What is the name of the passenger with the cheapest fare?", "SELECT name FROM passengers ORDER BY fare LIMIT 1"),
        Item("Which flights have no passengers?", "SELECT flight_id FROM flights WHERE flight_id NOT IN (SELECT flight_id FROM passengers)"),
        Item("Show names of passengers on flights longer than 1000 miles.",
             "SELECT T1.name FROM passengers AS T1 JOIN flights AS T2 ON T1.flight_id = T2.flight_id WHERE T2.distance > 1000",
             Flaw("SELECT name FROM passengers WHERE fare > 1000", "missing_join",
                  "distance lives in flights, which is not joined", _JOIN, False)),
        Item("What is the average fare?", "SELECT avg(fare) FROM passengers"),
        Item("Which origins have flights to more than one destination?",
             "SELECT origin FROM flights GROUP BY origin HAVING count(DISTINCT dest) > 1"),
        Item("List airport codes and cities.", "SELECT code, city FROM airports"),
    ],
}


def difficulty(sql: str) -> str:
    s = sql.lower()
    if " join " in s or "(select" in s or " having " in s:
        return "hard"
    if " group by " in s or " order by " in s or " limit " in s:
        return "medium"
    return "easy"


# ---------------------------------------------------------------------------
# files


def build_database(db_id: str, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        path.unlink()
    con = sqlite3.connect(path)
    try:
        con.executescript(DDL[db_id])
        con.commit()
    finally:
        con.close()


def tables_entry(db_id: str, path: Path) -> dict:
    """Spider ``tables.json`` record read back from the built database."""
    con = sqlite3.connect(path)
    try:
        tables = [r[0] for r in con.execute("SELECT name FROM sqlite_master WHERE type='table' ORDER BY rowid")]
        cols, types, pks, fks = [[-1, "*"]], ["text"], [], []
        index = {}
        for ti, t in enumerate(tables):
            for _, name, ctype, _, _, pk in con.execute(f"PRAGMA table_info({t})"):
                index[(t, name)] = len(cols)
                cols.append([ti, name])
                types.append("number" if ctype.upper() in ("INTEGER", "REAL") else "text")
                if pk:
                    pks.append(index[(t, name)])
        for t in tables:
            for row in con.execute(f"PRAGMA foreign_key_list({t})"):
                ref_table, src, dst = row[2], row[3], row[4]
                fks.append([index[(t, src)], index[(ref_table, dst)]])
    finally:
        con.close()
    return {
        "db_id": db_id,
        "table_names_original": tables,
        "table_names": [t.replace("_", " ") for t in tables],
        "column_names_original": cols,
        "column_names": [[ti, n.replace("_", " ")] for ti, n in cols],
        "column_types": types,
        "primary_keys": pks,
        "foreign_keys": fks,
    }


def write_corpus(root: str | Path) -> dict:
    """Write dataset, tables.json, databases and merge file under ``root``; returns their paths."""
    root = Path(root)
    db_root = root / "database"
    entries, records = [], []
    for db_id in sorted(DDL):
        db_file = db_root / db_id / f"{db_id}.sqlite"
        build_database(db_id, db_file)
        entries.append(tables_entry(db_id, db_file))
    for db_id in DDL:  # interleave in authoring order
        for item in ITEMS[db_id]:
            records.append({"db_id": db_id, "question": item.question, "query": item.gold_sql,
                            "difficulty": difficulty(item.gold_sql)})
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "dataset": root / "questions.json",
        "tables": root / "tables.json",
        "db_root": db_root,
        "merge_rules": root / "merge_rules.json",
    }
    paths["dataset"].write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")
    paths["tables"].write_text(json.dumps(entries, indent=1) + "\n", encoding="utf-8")
    paths["merge_rules"].write_text(json.dumps({"stages": []}, indent=1) + "\n", encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# responder


def _section(prompt: str, header: str) -> str:
    m = re.search(re.escape(header) + r"\n(.*?)(?:\n\n|\Z)", prompt, re.S)
    return m.group(1).strip() if m else ""


def _line_value(prompt: str, label: str) -> str:
    m = re.search(rf"^{re.escape(label)}\s*(.*)$", prompt, re.M)
    return m.group(1).strip() if m else ""


def _find_item(question: str) -> tuple[str, Item] | None:
    best = None
    for db_id, items in ITEMS.items():
        for it in items:
            if question.startswith(it.question) and (best is None or len(it.question) > len(best[1].question)):
                best = (db_id, it)
    return best


def _flaw_for(sql: str) -> tuple[Item, Flaw] | None:
    for items in ITEMS.values():
        for it in items:
            if it.flaw and it.flaw.pred_sql == sql.strip():
                return it, it.flaw
    return None


def _schema_db(prompt: str) -> str | None:
    tables = set(re.findall(r"^Table (\w+)\(", prompt, re.M))
    for db_id, ddl in DDL.items():
        if tables and tables <= set(re.findall(r"CREATE TABLE (\w+)", ddl)):
            return db_id
    return None


def _rules_reply(prompt: str) -> str:
    db_id = _line_value(prompt, "Database id:")
    rules = [{"entity_name": n, "description": d, "cue_phrases": c} for n, d, c in RULES.get(db_id, [])]
    return "```rules\n" + json.dumps(rules) + "\n```"


def _entities_reply(prompt: str) -> str:
    question = _line_value(prompt, "Question:").lower()
    lines = []
    for m in re.finditer(r"^- (\w+): .*?\(cues: (.*)\)$", prompt, re.M):
        cues = [c.strip().lower() for c in m.group(2).split(",")]
        lines.append(f"{m.group(1)}: {'true' if any(c in question for c in cues) else 'false'}")
    return "```entities\n" + "\n".join(lines) + "\n```"


def _sql_reply(prompt: str) -> str:
    found = _find_item(_line_value(prompt, "Question:"))
    routed = _schema_db(prompt)
    if found and found[0] == routed:
        item = found[1]
        sql = item.flaw.pred_sql if item.flaw else item.gold_sql
    else:
        first = re.search(r"^Table (\w+)\(", prompt, re.M)
        sql = f"SELECT count(*) FROM {first.group(1) if first else 'sqlite_master'}"
    return f"```sql\n{sql}\n```"


def _feedback_reply(prompt: str) -> str:
    hit = _flaw_for(_section(prompt, "Predicted SQL:"))
    if hit:
        return f"```feedback\n{hit[1].category}: {hit[1].detail}\n```"
    return "```feedback\nwrong_table: the query reads tables unrelated to the question\n```"


def _correction_reply(prompt: str) -> str:
    pred = _section(prompt, "Predicted SQL:")
    hit = _flaw_for(pred)
    if hit is None:
        return f"```sql\n{pred}\n```\n```guidelines\nwrong_table: Route questions to the database that holds the asked-about data.\n```"
    item, flaw = hit
    sql = item.gold_sql if flaw.fixable else flaw.pred_sql
    return f"```sql\n{sql}\n```\n```guidelines\n{flaw.category}: {flaw.guideline}\n```"


_HANDLERS = {
    "rules": _rules_reply,
    "entities": _entities_reply,
    "sql": _sql_reply,
    "feedback": _feedback_reply,
    "correction": _correction_reply,
}


def respond(request: LlmRequest) -> str:
    """Answer any pipeline prompt the way the authored corpus dictates."""
    handler = _HANDLERS.get(request.tag)
    if handler is None:
        raise ValueError(f"demo responder has no handler for tag {request.tag!r}")
    return handler(request.messages[0][1])
