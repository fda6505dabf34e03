from .cli import analyze, bench, generate, selftest, train

commands = [train, generate, bench, analyze, selftest]
