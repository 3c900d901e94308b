"""Structural linter for the OpenSCAD scripts this package emits.

Parses the subset of the language the exporter uses — module calls with
positional/named arguments (numbers, booleans, strings, nested vectors)
followed by ``;`` or a ``{ ... }`` block — and reports malformed syntax,
unknown modules, unbalanced brackets, and arity mistakes.  It is a
validator for emitted output, not a general OpenSCAD parser.
"""

from __future__ import annotations

from dataclasses import dataclass, field

KNOWN_MODULES = {
    "union", "difference", "intersection",
    "translate", "rotate", "scale",
    "sphere", "cube", "cylinder", "polyhedron",
}
# modules that act on children and need either a block or a chained call
TRANSFORMS = {"union", "difference", "intersection", "translate", "rotate", "scale"}
# leaf solids must end the chain with a semicolon
SOLIDS = {"sphere", "cube", "cylinder", "polyhedron"}


@dataclass
class LintIssue:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


@dataclass
class Token:
    kind: str  # ident | number | string | punct
    text: str
    line: int


class ScadSyntaxError(ValueError):
    pass


def _tokenize(src: str) -> list[Token]:
    toks: list[Token] = []
    i, line, n = 0, 1, len(src)
    while i < n:
        ch = src[i]
        if ch == "\n":
            line += 1
            i += 1
        elif ch in " \t\r":
            i += 1
        elif src.startswith("//", i):
            j = src.find("\n", i)
            i = n if j < 0 else j
        elif src.startswith("/*", i):
            j = src.find("*/", i + 2)
            if j < 0:
                raise ScadSyntaxError(f"line {line}: unterminated block comment")
            line += src.count("\n", i, j)
            i = j + 2
        elif ch == '"':
            j = i + 1
            while j < n and src[j] != '"':
                if src[j] == "\n":
                    raise ScadSyntaxError(f"line {line}: unterminated string")
                j += 1
            if j >= n:
                raise ScadSyntaxError(f"line {line}: unterminated string")
            toks.append(Token("string", src[i:j + 1], line))
            i = j + 1
        elif ch.isalpha() or ch == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            toks.append(Token("ident", src[i:j], line))
            i = j
        elif ch.isdigit() or (ch in "+-." and i + 1 < n
                              and (src[i + 1].isdigit() or src[i + 1] == ".")):
            j = i + 1
            while j < n and (src[j].isdigit() or src[j] in ".eE"
                             or (src[j] in "+-" and src[j - 1] in "eE")):
                j += 1
            toks.append(Token("number", src[i:j], line))
            i = j
        elif ch in "()[]{},;=":
            toks.append(Token("punct", ch, line))
            i += 1
        else:
            raise ScadSyntaxError(f"line {line}: unexpected character {ch!r}")
    return toks


@dataclass
class _Parser:
    toks: list[Token]
    pos: int = 0
    issues: list[LintIssue] = field(default_factory=list)

    def peek(self) -> Token | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self, kind: str | None = None, text: str | None = None) -> Token:
        t = self.peek()
        if t is None:
            last = self.toks[-1].line if self.toks else 1
            raise ScadSyntaxError(f"line {last}: unexpected end of input")
        if kind is not None and t.kind != kind:
            raise ScadSyntaxError(f"line {t.line}: expected {kind}, got {t.text!r}")
        if text is not None and t.text != text:
            raise ScadSyntaxError(f"line {t.line}: expected {text!r}, got {t.text!r}")
        self.pos += 1
        return t

    # value := number | bool | string | vector
    def value(self) -> None:
        t = self.peek()
        if t is None:
            raise ScadSyntaxError("unexpected end of input in value")
        if t.kind in ("number", "string"):
            self.take()
        elif t.kind == "ident" and t.text in ("true", "false"):
            self.take()
        elif t.kind == "punct" and t.text == "[":
            self.take(text="[")
            while True:
                t2 = self.peek()
                if t2 and t2.kind == "punct" and t2.text == "]":
                    self.take(text="]")
                    break
                self.value()
                t2 = self.peek()
                if t2 and t2.kind == "punct" and t2.text == ",":
                    self.take(text=",")
                elif t2 and t2.kind == "punct" and t2.text == "]":
                    self.take(text="]")
                    break
                else:
                    where = t2.line if t2 else t.line
                    raise ScadSyntaxError(f"line {where}: expected ',' or ']' in vector")
        else:
            raise ScadSyntaxError(f"line {t.line}: expected a value, got {t.text!r}")

    # args := '(' [arg {',' arg}] ')' ; arg := [ident '='] value
    def args(self, module: str, line: int) -> set[str]:
        named: set[str] = set()
        positional = 0
        self.take(text="(")
        t = self.peek()
        if t and t.kind == "punct" and t.text == ")":
            self.take(text=")")
        else:
            while True:
                t = self.peek()
                if (t and t.kind == "ident" and t.text not in ("true", "false")
                        and self.pos + 1 < len(self.toks)
                        and self.toks[self.pos + 1].text == "="):
                    name = self.take(kind="ident").text
                    self.take(text="=")
                    self.value()
                    if name in named:
                        self.issues.append(LintIssue(
                            t.line, f"duplicate argument {name!r} to {module}()"))
                    named.add(name)
                else:
                    self.value()
                    positional += 1
                t = self.peek()
                if t and t.kind == "punct" and t.text == ",":
                    self.take(text=",")
                    continue
                self.take(kind="punct", text=")")
                break
        self._check_arity(module, line, positional, named)
        return named

    def _check_arity(self, module: str, line: int, positional: int,
                     named: set[str]) -> None:
        total = positional + len(named)
        if module in ("union", "difference", "intersection"):
            if total:
                self.issues.append(LintIssue(line, f"{module}() takes no arguments"))
        elif module in ("translate", "scale"):
            if total != 1:
                self.issues.append(LintIssue(line, f"{module}() takes one vector"))
        elif module == "rotate":
            if not 1 <= total <= 2:
                self.issues.append(LintIssue(line, "rotate() takes a or (a, v)"))
        elif module == "sphere":
            if total != 1:
                self.issues.append(LintIssue(line, "sphere() takes one radius"))
        elif module == "cube":
            if positional + len(named - {"center"}) != 1:
                self.issues.append(LintIssue(line, "cube() takes size [, center]"))
        elif module == "cylinder":
            if not named >= {"h"} and positional == 0:
                self.issues.append(LintIssue(line, "cylinder() needs a height"))
        elif module == "polyhedron":
            if not {"points", "faces"} <= named or positional:
                self.issues.append(LintIssue(
                    line, "polyhedron() needs named points= and faces="))

    # statement := call {call} (';' | block) ; block := '{' {statement} '}'
    def statement(self) -> None:
        chain: list[tuple[str, int]] = []
        while True:
            t = self.take(kind="ident")
            if t.text not in KNOWN_MODULES:
                self.issues.append(LintIssue(t.line, f"unknown module {t.text!r}"))
            chain.append((t.text, t.line))
            self.args(t.text, t.line)
            nxt = self.peek()
            if nxt is None:
                raise ScadSyntaxError(
                    f"line {t.line}: statement missing ';' or block")
            if nxt.kind == "ident":
                continue
            if nxt.text == ";":
                self.take(text=";")
                last, line = chain[-1]
                if last in TRANSFORMS:
                    self.issues.append(LintIssue(
                        line, f"{last}() has no child before ';'"))
                break
            if nxt.text == "{":
                last, line = chain[-1]
                if last in SOLIDS:
                    self.issues.append(LintIssue(
                        line, f"{last}() takes no block"))
                self.take(text="{")
                while True:
                    t2 = self.peek()
                    if t2 is None:
                        raise ScadSyntaxError(f"line {line}: unclosed block")
                    if t2.kind == "punct" and t2.text == "}":
                        self.take(text="}")
                        break
                    self.statement()
                break
            raise ScadSyntaxError(
                f"line {nxt.line}: expected ';', '{{' or call, got {nxt.text!r}")

    def program(self) -> None:
        while self.peek() is not None:
            self.statement()


def lint_scad(src: str) -> list[LintIssue]:
    """Lint a script; returns issues (empty means it passed).  Syntax that
    cannot be parsed at all comes back as a single issue too."""
    try:
        toks = _tokenize(src)
        parser = _Parser(toks)
        parser.program()
        return parser.issues
    except ScadSyntaxError as exc:
        msg = str(exc)
        line = 1
        if msg.startswith("line "):
            try:
                line = int(msg.split(":", 1)[0][5:])
            except ValueError:
                pass
        return [LintIssue(line, msg)]
