from smpc.cli import main

raise SystemExit(main())
