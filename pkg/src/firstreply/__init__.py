"""Effects of first replies on newcomer retention in online communities.

Modules: ``corpus`` (archives, threads, first-post events), ``lexicon``
(SAGE, annotations, hate-word substitution), ``scoring`` (sentiment and
attribute scores), ``cohort`` (matching), ``stats`` (ERR, rank tests,
engagement model), ``simulate`` (counterfactual growth), ``synth``
(synthetic archives with planted truth) and ``cli``.
"""

__version__ = "0.1.0"
