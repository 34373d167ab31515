from bdk.cli import main

main()
