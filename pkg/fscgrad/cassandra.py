"""Reader and writer for Cassandra's `.pomdp` text format.

Supported: ``discount``, ``values``, ``states``, ``actions``, ``observations``,
``start`` (vector, ``uniform``, a single state, ``include:``/``exclude:``), and the
``T:``, ``O:``, ``R:`` entries in their element, row and matrix forms with
``*`` wildcards and the ``uniform``/``identity`` keywords. Identifiers may be
names or integer indices.

Rewards R(a, s, s', o) become costs g(x, y, u) = -E[R | x, u]; the
observation y the controller sees at time t does not enter the expectation.
"""
import logging
import re

import numpy as np

from fscgrad.errors import ModelFormatError, NonStochasticError
from fscgrad.model import INPUT_TOL, STOCHASTIC_TOL, PomdpModel, normalize_rows

logger = logging.getLogger(__name__)

PREAMBLE = ("discount", "values", "states", "actions", "observations", "start")
ENTRIES = ("T", "O", "R")
# start vectors are often typed to four decimals
START_TOL = 1e-3
_TOKEN = re.compile(r":|[^\s:]+")


def tokenize(text):
    tokens = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0]
        tokens.extend((tok, lineno) for tok in _TOKEN.findall(line))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = tokenize(text)
        self.pos = 0
        self.discount = 1.0
        self.sign = -1.0
        self.states = self.actions = self.observations = None
        self.start = None
        self.T = self.O = self.R = None
        self.row_lines = {}

    # token helpers

    def peek(self, offset=0):
        i = self.pos + offset
        return self.tokens[i][0] if i < len(self.tokens) else None

    @property
    def line(self):
        if self.pos < len(self.tokens):
            return self.tokens[self.pos][1]
        return self.tokens[-1][1] if self.tokens else 0

    def next(self):
        if self.pos >= len(self.tokens):
            raise ModelFormatError("unexpected end of file", self.line)
        tok = self.tokens[self.pos][0]
        self.pos += 1
        return tok

    def expect(self, value):
        line = self.line
        tok = self.next()
        if tok != value:
            raise ModelFormatError(f"expected '{value}', found '{tok}'", line)

    def number(self):
        line = self.line
        tok = self.next()
        try:
            return float(tok)
        except ValueError:
            raise ModelFormatError(f"expected a number, found '{tok}'", line) from None

    def numbers(self, count):
        return np.array([self.number() for _ in range(count)])

    def rest_of_line(self):
        line = self.line
        out = []
        while self.pos < len(self.tokens) and self.tokens[self.pos][1] == line:
            out.append(self.next())
        return out

    def ident(self, names, kind):
        line = self.line
        tok = self.next()
        if names is None:
            raise ModelFormatError(f"{kind} used before '{kind}s:' was declared", line)
        if tok == "*":
            return list(range(len(names)))
        if tok in names:
            return [names.index(tok)]
        if tok.isdigit() and int(tok) < len(names):
            return [int(tok)]
        raise ModelFormatError(f"undeclared {kind} '{tok}'", line)

    # statements

    def parse(self):
        while self.pos < len(self.tokens):
            line = self.line
            key = self.next()
            if key in PREAMBLE:
                self.preamble(key, line)
            elif key in ENTRIES:
                self.require_spaces(line)
                self.expect(":")
                getattr(self, f"entry_{key}")(line)
            else:
                raise ModelFormatError(f"unknown statement '{key}'", line)
        self.require_spaces(self.line)
        return self.finish()

    def require_spaces(self, line):
        if self.states is None or self.actions is None or self.observations is None:
            raise ModelFormatError("states, actions and observations must be declared first", line)
        if self.T is None:
            S, A, Y = len(self.states), len(self.actions), len(self.observations)
            self.T = np.zeros((A, S, S))
            self.O = np.zeros((A, S, Y))
            self.R = np.zeros((A, S, S, Y))

    def declare(self, line):
        self.expect(":")
        items = self.rest_of_line()
        if not items:
            raise ModelFormatError("empty declaration", line)
        if len(items) == 1 and items[0].isdigit():
            return [str(i) for i in range(int(items[0]))]
        return items

    def preamble(self, key, line):
        if key == "discount":
            self.expect(":")
            self.discount = self.number()
        elif key == "values":
            self.expect(":")
            kind = self.next()
            if kind not in ("reward", "cost"):
                raise ModelFormatError(f"values must be 'reward' or 'cost', found '{kind}'", line)
            self.sign = -1.0 if kind == "reward" else 1.0
        elif key == "states":
            self.states = self.declare(line)
        elif key == "actions":
            self.actions = self.declare(line)
        elif key == "observations":
            self.observations = self.declare(line)
        else:
            self.parse_start(line)

    def parse_start(self, line):
        if self.states is None:
            raise ModelFormatError("start given before states", line)
        S = len(self.states)
        mode = self.peek()
        if mode in ("include", "exclude"):
            self.next()
            self.expect(":")
            chosen = set()
            for tok in self.rest_of_line():
                chosen.update(self._lookup(tok, line))
            mask = np.zeros(S, dtype=bool)
            mask[list(chosen)] = True
            if mode == "exclude":
                mask = ~mask
            self.start = mask / mask.sum()
            return
        self.expect(":")
        if self.peek() == "uniform":
            self.next()
            self.start = np.full(S, 1.0 / S)
        elif self.peek() in self.states and not _is_float(self.peek()):
            self.start = np.zeros(S)
            self.start[self.states.index(self.next())] = 1.0
        else:
            line = self.line
            values = self.numbers(S)
            if np.any(values < 0.0):
                raise NonStochasticError("start has a negative probability", line)
            try:
                self.start = normalize_rows(values[None, :], "start", tol=START_TOL)[0]
            except NonStochasticError as e:
                raise NonStochasticError(str(e), line) from None

    def _lookup(self, tok, line):
        if tok in self.states:
            return [self.states.index(tok)]
        if tok.isdigit() and int(tok) < len(self.states):
            return [int(tok)]
        raise ModelFormatError(f"undeclared state '{tok}'", line)

    def matrix(self, rows, cols, line, allow_identity):
        if self.peek() == "uniform":
            self.next()
            return np.full((rows, cols), 1.0 / cols)
        if self.peek() == "identity":
            if not allow_identity or rows != cols:
                raise ModelFormatError("'identity' is only valid for square probability matrices", line)
            self.next()
            return np.eye(rows)
        return self.numbers(rows * cols).reshape(rows, cols)

    def vector(self, size, allow_uniform=True):
        if allow_uniform and self.peek() == "uniform":
            self.next()
            return np.full(size, 1.0 / size)
        return self.numbers(size)

    def mark(self, table, aa, ss, line):
        for a in aa:
            for s in ss:
                self.row_lines[(table, a, s)] = line

    def entry_T(self, line):
        S = len(self.states)
        aa = self.ident(self.actions, "action")
        if self.peek() != ":":
            self.T[aa] = self.matrix(S, S, line, allow_identity=True)
            self.mark("T", aa, range(S), line)
            return
        self.next()
        ss = self.ident(self.states, "state")
        if self.peek() != ":":
            self.T[np.ix_(aa, ss)] = self.vector(S)
        else:
            self.next()
            ss2 = self.ident(self.states, "state")
            self.T[np.ix_(aa, ss, ss2)] = self.number()
        self.mark("T", aa, ss, line)

    def entry_O(self, line):
        S, Y = len(self.states), len(self.observations)
        aa = self.ident(self.actions, "action")
        if self.peek() != ":":
            self.O[aa] = self.matrix(S, Y, line, allow_identity=True)
            self.mark("O", aa, range(S), line)
            return
        self.next()
        ss = self.ident(self.states, "state")
        if self.peek() != ":":
            self.O[np.ix_(aa, ss)] = self.vector(Y)
        else:
            self.next()
            oo = self.ident(self.observations, "observation")
            self.O[np.ix_(aa, ss, oo)] = self.number()
        self.mark("O", aa, ss, line)

    def entry_R(self, line):
        S, Y = len(self.states), len(self.observations)
        aa = self.ident(self.actions, "action")
        self.expect(":")
        ss = self.ident(self.states, "state")
        if self.peek() != ":":
            self.R[np.ix_(aa, ss)] = self.matrix(S, Y, line, allow_identity=False)
            return
        self.next()
        ss2 = self.ident(self.states, "state")
        if self.peek() != ":":
            self.R[np.ix_(aa, ss, ss2)] = self.vector(Y, allow_uniform=False)
            return
        self.next()
        oo = self.ident(self.observations, "observation")
        self.R[np.ix_(aa, ss, ss2, oo)] = self.number()

    def check_rows(self, table, name):
        if np.any(table < 0.0) or np.any(table > 1.0):
            a, s = (int(i) for i in np.argwhere((table < 0.0) | (table > 1.0))[0][:2])
            raise NonStochasticError(f"{name} has a probability outside [0, 1]", self.row_lines.get((name, a, s)))
        sums = table.sum(axis=-1)
        off = np.abs(sums - 1.0)
        bad = np.argwhere(off > INPUT_TOL)
        if bad.size:
            a, s = (int(i) for i in bad[0])
            raise NonStochasticError(
                f"{name}: {self.actions[a]} : {self.states[s]} sums to {sums[a, s]:.12g}",
                self.row_lines.get((name, a, s)),
            )
        fix = off > STOCHASTIC_TOL
        if np.any(fix):
            logger.warning(f"⚠️ Renormalising {int(fix.sum())} {name} row(s) with limited precision")
            table[fix] = table[fix] / sums[fix][:, None]
        return table

    def finish(self):
        T = self.check_rows(self.T, "T")
        O = self.check_rows(self.O, "O")
        # expected reward r(a, s) over the next state and the observation it emits
        reward = np.einsum("ast,ato,asto->as", T, O, self.R)
        flat = self.R.reshape(self.R.shape[0], self.R.shape[1], -1)
        constant = np.ptp(flat, axis=-1) == 0.0
        reward[constant] = flat[constant][:, 0]
        cost = self.sign * reward.T
        cost = np.broadcast_to(cost[:, None, :], (len(self.states), len(self.observations), len(self.actions)))
        return PomdpModel(
            transition=T,
            observation=O,
            cost=cost,
            initial_dist=self.start,
            state_names=self.states,
            obs_names=self.observations,
            action_names=self.actions,
            discount=self.discount,
        )


def _is_float(tok):
    try:
        float(tok)
        return True
    except (TypeError, ValueError):
        return False


def parse_pomdp(text):
    """Parse Cassandra `.pomdp` text into a validated PomdpModel."""
    return _Parser(text).parse()


def _names_line(key, names):
    if list(names) == [str(i) for i in range(len(names))]:
        return f"{key}: {len(names)}"
    return f"{key}: " + " ".join(names)


def serialize_pomdp(model):
    """Write a model as `.pomdp` text with ``values: cost``.

    The format has no way to make the cost depend on the current observation,
    so such models must go through the JSON format instead.
    """
    if not np.all(model.cost == model.cost[:, :1, :]):
        raise ModelFormatError("cost depends on the current observation; use the JSON model format")
    lines = [
        f"discount: {model.discount!r}",
        "values: cost",
        _names_line("states", model.state_names),
        _names_line("actions", model.action_names),
        _names_line("observations", model.obs_names),
    ]
    if model.initial_dist is not None:
        lines.append("start: " + " ".join(repr(float(p)) for p in model.initial_dist))
    lines.append("")
    for u, a in enumerate(model.action_names):
        lines.append(f"T: {a}")
        lines.extend(" ".join(repr(float(p)) for p in row) for row in model.transition[u])
    lines.append("")
    for u, a in enumerate(model.action_names):
        lines.append(f"O: {a}")
        lines.extend(" ".join(repr(float(p)) for p in row) for row in model.observation[u])
    lines.append("")
    for u, a in enumerate(model.action_names):
        for x, s in enumerate(model.state_names):
            lines.append(f"R: {a} : {s} : * : * {float(model.cost[x, 0, u])!r}")
    return "\n".join(lines) + "\n"
