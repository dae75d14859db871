from toothfuse.cli import main

main()
