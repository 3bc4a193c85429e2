"""End-to-end text-to-SQL: database routing, schema-linked SQL generation, self-correction."""

__version__ = "0.1.0"
