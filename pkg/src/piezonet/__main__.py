from piezonet.cli import main

raise SystemExit(main())
