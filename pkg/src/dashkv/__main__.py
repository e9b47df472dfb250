"""Main invocation for the dashkv command line."""

from dashkv import cli

cli.main()
