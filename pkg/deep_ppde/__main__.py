from deep_ppde.cli import main

raise SystemExit(main())
