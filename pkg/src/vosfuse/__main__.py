from vosfuse.cli import main

raise SystemExit(main())
