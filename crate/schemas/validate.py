"""Validates a JSON document (or JSONL with --lines) against a schema in this directory.

usage: validate.py SCHEMA_NAME FILE [--lines]
"""
import json
import pathlib
import sys

import jsonschema
from referencing import Registry, Resource

here = pathlib.Path(__file__).resolve().parent
resources = []
for path in here.glob("*.schema.json"):
    doc = json.loads(path.read_text())
    resources.append((doc["$id"], Resource.from_contents(doc)))
registry = Registry().with_resources(resources)

name, target = sys.argv[1], pathlib.Path(sys.argv[2])
schema = json.loads((here / f"{name}.schema.json").read_text())
validator = jsonschema.Draft202012Validator(schema, registry=registry)
text = target.read_text()
docs = [json.loads(l) for l in text.splitlines() if l.strip()] if "--lines" in sys.argv else [json.loads(text)]
failed = False
for i, doc in enumerate(docs):
    for err in validator.iter_errors(doc):
        failed = True
        print(f"{target}:{i}: {'/'.join(map(str, err.absolute_path))}: {err.message}", file=sys.stderr)
sys.exit(1 if failed else 0)
