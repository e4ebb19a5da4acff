from pacdrgp.cli.main import main

raise SystemExit(main())
