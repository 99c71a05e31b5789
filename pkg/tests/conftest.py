import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from firstreply.corpus import FirstPostEvent, Post, ReplyFeatures

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_post(pid, author, t, parent=None, link=None, body="hello there", community="c", acct=0):
    if parent is None:
        link = pid
    return Post(pid, author, community, t, parent, link if link is not None else parent, body, acct)


def make_event(user, treated=False, engaged=False, community="c", kind="comment", t=1,
               age=100.0, nest=1, valence=0.0, words=5, reply=None):
    if treated and reply is None:
        reply = (0.0, 0.0, 0.0)
    return FirstPostEvent(
        user=user, community=community, kind=kind, post_id="p" + user, first_post_time=t,
        thread_root="r" + user, account_age=age, nest_level=nest, valence=valence,
        word_count=words, treated=treated,
        first_reply=ReplyFeatures(*reply) if treated else None, engaged=engaged,
    )


def random_pool(rng, n_treated, n_control, shift=0.8, community="c", kind="comment"):
    """Events with four covariates; treated users are shifted to plant imbalance."""
    events = []
    for arm, n in (("t", n_treated), ("c", n_control)):
        delta = shift if arm == "t" else 0.0
        age = rng.lognormal(10 + delta, 1.0, n)
        nest = rng.integers(1, 5, n) + (rng.random(n) < delta / 2)
        val = np.clip(rng.normal(delta / 4, 0.4, n), -1, 1)
        words = rng.poisson(20 + 10 * delta, n)
        for i in range(n):
            events.append(make_event(
                f"{arm}{i:04d}", treated=arm == "t", engaged=bool(rng.random() < 0.5),
                community=community, kind=kind, age=float(age[i]), nest=int(nest[i]),
                valence=float(val[i]), words=int(words[i]), reply=(0.1, 0.2, 0.3),
            ))
    return events


@pytest.fixture
def post():
    return make_post


@pytest.fixture
def event():
    return make_event


# every SAGE fit anywhere in the suite must have a non-increasing objective
@pytest.fixture(autouse=True)
def _sage_monotone(monkeypatch):
    import firstreply.lexicon as lex
    import firstreply.pipeline as pipe

    real = lex.fit_sage
    fits = []

    def checked(*args, **kwargs):
        model = real(*args, **kwargs)
        fits.append(model)
        return model

    monkeypatch.setattr(lex, "fit_sage", checked)
    monkeypatch.setattr(pipe, "fit_sage", checked)
    yield fits
    for model in fits:
        trace = model.objective_trace
        assert all(b <= a for a, b in zip(trace, trace[1:])), "SAGE objective increased"


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
